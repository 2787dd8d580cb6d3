//! Drives the experiment harness from code instead of the CLI: a small
//! attack-eval on the procedural digit corpus, written to a temp directory.

use maml_privacy::harness::{read_csv, run_experiment, Command, DatasetSource, ExperimentSpec};

fn main() -> maml_privacy::Result<()> {
    let mut spec = ExperimentSpec::for_command(Command::AttackEval);
    spec.dataset = DatasetSource::Synthetic {
        classes: 5,
        per_class: 60,
    };
    spec.held_out_per_class = 20;
    spec.meta_test_tasks = 20;
    spec.ways = vec![3];
    spec.shots = vec![1, 2];
    spec.n = 10;
    spec.calibration_trials = 10;
    spec.output_dir = std::env::temp_dir().join("maml-privacy-spec-example");
    println!("{}", spec.to_toml()?);

    let out = run_experiment(&spec)?;
    for path in &out.artifacts {
        println!("wrote {}", path.display());
    }
    for row in read_csv(spec.output_dir.join("results.csv"))? {
        println!(
            "{} acc {:.2} precision {:.2} meta-test {:.2}",
            row.experiment_id, row.accuracy, row.precision, row.meta_test_accuracy
        );
    }
    Ok(())
}
