//! Data ingestion: the vendored MNIST IDX files and teacher-labelled Gaussian
//! data, with exact whitening.

use std::path::Path;

use wdlab::harness::data;
use wdlab::nn::{Activation, NetworkSpec};

fn main() -> wdlab::Result<()> {
    let [(img, lab), _] = data::mnist_paths(Path::new("data/mnist"));
    match data::load_mnist(&img, &lab) {
        Ok(d) => {
            let first: f64 = d.x.row(0).iter().sum();
            println!("MNIST: {} images of {} pixels, first label {}, first image pixel mass {first:.3}", d.len(), d.dim(), d.y[0]);
        }
        Err(e) => println!("MNIST unavailable ({e}); run from the repository root"),
    }
    let teacher = NetworkSpec::mlp(&[20, 32, 10], Activation::Relu, false);
    let d = data::gen_synthetic(10_000, 20, 10, &teacher, 1, true)?;
    let mut counts = [0usize; 10];
    for &y in &d.y {
        counts[y] += 1;
    }
    println!("synthetic: class counts {counts:?}");
    println!("whitened covariance residual {:.2e}", data::whiteness_residual(&d.x));
    match data::gen_synthetic(10, 20, 10, &teacher, 1, true) {
        Err(e) => println!("n <= d with whitening: {e}"),
        Ok(_) => println!("unexpectedly whitened an underdetermined sample"),
    }
    Ok(())
}
