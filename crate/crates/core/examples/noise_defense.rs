//! How far each noise site pushes the shared gradient away from the clean one.
//!
//! For every site and sigma: mean cosine between defended and undefended
//! gradients over 20 tasks.

use maml_privacy::data::{load_idx, sample_task, Dataset, FewShotSpec};
use maml_privacy::defense::{wrap_task_pipeline, NoiseSite, NoiseSpec};
use maml_privacy::maml::TrainConfig;
use maml_privacy::numcore::{cosine_similarity, Architecture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arch = Architecture::mnist(3);
    let omega = arch.init(&mut rng);
    let cfg = TrainConfig::default();
    let tasks: Vec<_> = (0..20)
        .map(|_| sample_task(&data, FewShotSpec::new(3, 1)?, &mut rng))
        .collect::<Result<_, _>>()?;

    let sigmas = [0.0, 0.01, 0.1, 0.3, 1.0];
    print!("{:<22}", "site \\ sigma");
    for s in sigmas {
        print!("{s:>8}");
    }
    println!();
    for site in NoiseSite::ALL {
        print!("{:<22}", site.as_str());
        for sigma in sigmas {
            let mut total = 0.0;
            for (k, task) in tasks.iter().enumerate() {
                let clean = wrap_task_pipeline(&arch, task, &omega, &NoiseSpec::new(site, 0.0, 0.0, 0)?, &cfg)?;
                let noisy =
                    wrap_task_pipeline(&arch, task, &omega, &NoiseSpec::new(site, 0.0, sigma, k as u64)?, &cfg)?;
                total += cosine_similarity(clean.g.as_params(), noisy.g.as_params())?;
            }
            print!("{:>8.3}", total / tasks.len() as f64);
        }
        println!();
    }
    Ok(())
}
