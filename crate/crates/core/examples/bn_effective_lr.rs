//! Scale invariance under batch normalization: rescaling a BN-covered layer
//! leaves the output unchanged and divides its gradient by the scale, so the
//! step it receives behaves like learning rate `η/‖θ_l‖²`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdlab::diagnostics;
use wdlab::linalg::{self, Matrix};
use wdlab::loss::{self, LossKind, Targets};
use wdlab::nn::{self, Activation, Mode, NetworkParams, NetworkSpec};

fn main() -> wdlab::Result<()> {
    let spec = NetworkSpec::mlp(&[8, 16, 16, 3], Activation::Relu, true).with_bn_epsilon(1e-16);
    let params = NetworkParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(5))?;
    let x = Matrix::from_fn(32, 8, |r, c| ((r * 5 + c * 11) % 13) as f64 / 6.0 - 1.0);
    let y: Vec<usize> = (0..32).map(|r| r % 3).collect();
    let grad = |p: &NetworkParams| -> wdlab::Result<(Matrix, Matrix)> {
        let t = nn::forward_trace(&spec, p, &x, Mode::Train)?;
        let (_, d) = loss::loss_and_grad(LossKind::CrossEntropySoftmax, t.logits(), Targets::Labels(&y))?;
        Ok((t.logits().clone(), nn::backward(&spec, p, &t, &d)?.weights[0].clone()))
    };
    let (f0, g0) = grad(&params)?;
    for alpha in [0.1, 10.0, 1000.0] {
        let scaled = nn::scale_layer(&params, 0, alpha)?;
        let (f, g) = grad(&scaled)?;
        println!(
            "α = {alpha:>6}: output change {:.2e}, |∇| ratio {:.6} (1/α = {:.6}), effective lr at η=0.1: {:.3e}",
            linalg::rel_err(f.as_slice(), f0.as_slice()),
            linalg::norm2(g.as_slice()) / linalg::norm2(g0.as_slice()),
            1.0 / alpha,
            diagnostics::effective_lr(0.1, nn::layer_norms(&scaled)[0])?
        );
    }
    Ok(())
}
