//! The meta-learner sees one task's shared gradient and asks whether a given
//! image was in that task's query set.
//!
//! First a single paired reconstruction (member prior vs. a same-class
//! outsider), then a calibrated 40-trial membership game.

use maml_privacy::attack::{
    reconstruct_query, run_mi_game, AttackConfig, AttackTarget, GameSetup, GradientMatching, Prior, Scope,
};
use maml_privacy::data::{load_idx, sample_task, Dataset, FewShotSpec};
use maml_privacy::maml::{run_task, NoHooks, TrainConfig};
use maml_privacy::numcore::Architecture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maml_privacy::Result<()> {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let data = Dataset::new(load_idx(
        root.join("images-idx3-ubyte.gz"),
        root.join("labels-idx1-ubyte.gz"),
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = Architecture::mnist(3);
    let omega = arch.init(&mut rng);
    let task = sample_task(&data, FewShotSpec::new(3, 1)?, &mut rng)?;
    let trace = run_task(&arch, &omega, &task, &TrainConfig::default(), &mut NoHooks)?;

    let member = &task.query[0];
    let outsider = data
        .class_indices(member.label)
        .iter()
        .find(|&&i| !task.contains_index(i))
        .map(|&i| data.get(i))
        .unwrap();

    // slot labels follow the query set, prior's class first
    let mut labels = task.query_batch().labels;
    let local = task.local_label(member.label).unwrap();
    let at = labels.iter().position(|&l| l == local).unwrap();
    labels.remove(at);
    labels.insert(0, local);
    let cfg = AttackConfig {
        batch_slots: labels.len(),
        ..Default::default()
    };
    for (name, x0) in [("member", member), ("non-member", outsider)] {
        let prior = Prior {
            pixels: x0.flat().to_vec(),
            labels: labels.clone(),
        };
        let r = reconstruct_query(&arch, &trace.gradient, &omega, &prior, &cfg)?;
        println!(
            "{name:>10}: ssim {:.3}  objective {:.4}",
            r.ssim_to_prior, r.final_objective
        );
    }

    let setup = GameSetup {
        arch: &arch,
        omega: &omega,
        pool: &data,
        few_shot: FewShotSpec::new(3, 1)?,
        train: TrainConfig::default(),
        noise: None,
        target: AttackTarget::Query,
        scope: Scope::Local,
        n: 40,
        calibration_trials: 40,
        fixed_threshold: None,
        seed: 11,
    };
    let r = run_mi_game(
        &setup,
        &mut GradientMatching {
            cfg: AttackConfig::default(),
        },
    )?;
    println!(
        "game: accuracy {:.3} recall {:?} precision {:?} (threshold {:.3}, TP {} FP {} TN {} FN {})",
        r.accuracy, r.recall, r.precision, r.threshold, r.tp, r.fp, r.tn, r.fn_
    );
    Ok(())
}
