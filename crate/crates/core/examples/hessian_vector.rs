//! Exact Hessian-vector products on the MNIST classifier, checked against a
//! finite difference of gradients.

use maml_privacy::data::{load_idx, sample_task, Dataset, FewShotSpec};
use maml_privacy::numcore::{grad, hvp, Architecture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let task = sample_task(&data, FewShotSpec::new(3, 2)?, &mut rng)?;
    let batch = task.support_batch();

    let arch = Architecture::mnist(3);
    let omega = arch.init(&mut rng);
    let flat: Vec<f64> = (0..omega.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = omega.unflatten(&flat)?;

    let hv = hvp(&arch, &omega, &batch, &v)?.into_params().flatten();

    let h = 1e-5;
    let plus = grad(&arch, &omega.axpy(h, &v)?, &batch)?.into_params().flatten();
    let minus = grad(&arch, &omega.axpy(-h, &v)?, &batch)?.into_params().flatten();
    let fd: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();

    let err = hv.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    println!("{} parameters", omega.num_params());
    println!("|Hv| = {:.6e}", norm);
    println!("relative error vs finite differences: {:.3e}", err / norm);
    Ok(())
}
