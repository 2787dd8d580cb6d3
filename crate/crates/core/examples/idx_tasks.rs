//! Load the bundled MNIST subset, sample a few-shot task, and write a slice
//! of it back out as IDX.
//!
//! ```bash
//! cargo run --release --example idx_tasks
//! ```

use std::path::PathBuf;

use maml_privacy::data::{load_idx, sample_task, write_idx, Dataset, FewShotSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    println!("{} images, classes {:?}", data.len(), data.classes());

    let (train, test) = data.split_per_class(50)?;
    println!("meta-train pool {}, meta-test pool {}", train.len(), test.len());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let task = sample_task(&train, FewShotSpec::new(5, 2)?, &mut rng)?;
    println!("task classes {:?}", task.classes);
    println!("support indices {:?}", task.support_indices);
    println!("query indices   {:?}", task.query_indices);
    for ex in &task.support {
        println!(
            "  support digit {} -> local label {}",
            ex.label,
            task.local_label(ex.label).unwrap()
        );
    }

    // written raw; the loader sniffs the gzip magic itself
    let dir = std::env::temp_dir().join("maml-privacy-idx-example");
    std::fs::create_dir_all(&dir).map_err(|e| maml_privacy::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let (img, lab) = (dir.join("task-images.idx"), dir.join("task-labels.idx"));
    write_idx(&task.support, &img, &lab)?;
    let back = load_idx(&img, &lab)?;
    assert_eq!(back, task.support);
    println!("round-tripped {} support images through {}", back.len(), dir.display());
    Ok(())
}
