//! Second-order MAML on 3-way 1-shot MNIST tasks.
//!
//! Prints meta-test accuracy after every epoch and saves the final
//! meta-parameters as a checkpoint.

use maml_privacy::data::{load_idx, sample_task, Dataset, FewShotSpec};
use maml_privacy::maml::{load_checkpoint, save_checkpoint, train_run, NoHooks, TrainConfig};
use maml_privacy::numcore::Architecture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    let (train, test) = data.split_per_class(50)?;
    let few_shot = FewShotSpec::new(3, 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eval: Vec<_> = (0..50)
        .map(|_| sample_task(&test, few_shot, &mut rng))
        .collect::<Result<_, _>>()?;
    let arch = Architecture::mnist(3);
    let init = arch.init(&mut rng);
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };

    let traj = train_run(&arch, &cfg, few_shot, init, &train, &eval, &mut rng, &mut NoHooks)?;
    for (epoch, acc) in traj.meta_test_accuracy.iter().enumerate() {
        println!("epoch {epoch:>2}  meta-test accuracy {acc:.3}");
    }

    let path = std::env::temp_dir().join("maml-privacy-example.ckpt");
    save_checkpoint(traj.final_state(), &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(&back, traj.final_state());
    println!("checkpoint after {} meta-steps: {}", back.iteration, path.display());
    Ok(())
}
