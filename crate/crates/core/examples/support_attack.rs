//! Support-set membership: the adversary also knows the task's query set and
//! emulates the whole adaptation step while matching the shared gradient.

use maml_privacy::attack::{run_mi_game, AttackConfig, AttackTarget, GameSetup, GradientMatching, Scope};
use maml_privacy::data::{load_idx, Dataset, FewShotSpec};
use maml_privacy::maml::{Order, TrainConfig};
use maml_privacy::numcore::Architecture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    let arch = Architecture::mnist(3);
    let omega = arch.init(&mut ChaCha8Rng::seed_from_u64(5));

    for (order, scope) in [
        (Order::Second, Scope::Local),
        (Order::First, Scope::Local),
        (Order::Second, Scope::Global),
    ] {
        let setup = GameSetup {
            arch: &arch,
            omega: &omega,
            pool: &data,
            few_shot: FewShotSpec::new(3, 1)?,
            train: TrainConfig {
                order,
                ..TrainConfig::default()
            },
            noise: None,
            target: AttackTarget::Support,
            scope,
            n: 20,
            calibration_trials: 20,
            fixed_threshold: None,
            seed: 3,
        };
        let r = run_mi_game(
            &setup,
            &mut GradientMatching {
                cfg: AttackConfig::default(),
            },
        )?;
        println!(
            "{order:?} order, {scope:?} scope: accuracy {:.3}, threshold {:.3}",
            r.accuracy, r.threshold
        );
        for row in r.transcript.iter().take(4) {
            println!(
                "   trial {} b={} ssim {:.3} -> {}",
                row.trial, row.b, row.ssim, row.decision
            );
        }
    }
    Ok(())
}
