//! Two different (support, query) pairs that a single-neuron MAML learner
//! cannot tell apart from their shared gradient.

use maml_privacy::theory::{sample_instance, verify_prop1, NeuronModel, NeuronSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let model = NeuronModel { a: 0.8, b: 0.3 };
    let support = NeuronSample { x: 0.5, y: -0.4 };
    let query = NeuronSample { x: 1.2, y: 0.1 };
    let other_support = NeuronSample { x: 0.4, y: 0.9 };
    let report = verify_prop1(&model, support, query, other_support, 0.1)?;
    print!("{}", report.render());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut built, mut refused) = (0, 0);
    for _ in 0..1000 {
        match sample_instance(&mut rng).verify() {
            Ok(r) if r.collision().is_some() => built += 1,
            Ok(_) => refused += 1,
            Err(_) => {} // sample sat on the kink
        }
    }
    println!("\nrandom instances: {built} collisions built, {refused} reported unsatisfiable");
    Ok(())
}
