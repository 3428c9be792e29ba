//! L2 regularization and weight decay coincide for plain SGD but not for Adam
//! or K-FAC, where the preconditioner also rescales the L2 term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdlab::linalg::{self, Matrix};
use wdlab::loss::{self, LossKind, Targets};
use wdlab::nn::{self, Activation, Mode, NetworkParams, NetworkSpec};
use wdlab::optim::{Coupling, CouplingMode, Optimizer, OptimizerConfig, OptimizerKind, StepBatch};

fn run(kind: OptimizerKind, mode: CouplingMode, steps: usize) -> wdlab::Result<Vec<f64>> {
    let spec = NetworkSpec::mlp(&[6, 10, 4], Activation::Relu, false);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = NetworkParams::init(&spec, &mut rng)?;
    let x = Matrix::from_fn(32, 6, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
    let y: Vec<usize> = (0..32).map(|r| r % 4).collect();
    let cfg = OptimizerConfig {
        kind,
        lr: if kind == OptimizerKind::Adam { 1e-3 } else { 0.05 },
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg, &spec)?;
    let coupling = Coupling::new(mode, 0.01, vec![true; spec.num_layers()])?;
    for _ in 0..steps {
        let trace = nn::forward_trace(&spec, &params, &x, Mode::Train)?;
        let (_, d) = loss::loss_and_grad(LossKind::CrossEntropySoftmax, trace.logits(), Targets::Labels(&y))?;
        let g = nn::backward(&spec, &params, &trace, &d)?;
        let batch = StepBatch {
            trace: &trace,
            loss: LossKind::CrossEntropySoftmax,
        };
        opt.step(&spec, &mut params, &g, &coupling, Some(batch), &mut rng)?;
    }
    Ok(params.flatten())
}

fn main() -> wdlab::Result<()> {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::KfacG] {
        let l2 = run(kind, CouplingMode::L2, 200)?;
        let wd = run(kind, CouplingMode::WeightDecay, 200)?;
        let identical = l2.iter().zip(&wd).all(|(a, b)| a.to_bits() == b.to_bits());
        println!(
            "{kind:?}: bit-identical {identical}, relative difference {:.3e}",
            linalg::rel_err(&l2, &wd)
        );
    }
    Ok(())
}
