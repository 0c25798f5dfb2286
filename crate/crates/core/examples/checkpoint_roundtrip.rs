//! Saves a freshly initialised model and reloads it bit for bit.

use htan::checkpoint;
use htan::data::RegimeSwitchingSpec;
use htan::training::{Model, TrainConfig};

fn main() -> htan::Result<()> {
    let model = Model::new(&TrainConfig::default(), &RegimeSwitchingSpec::default())?;
    let path = std::env::temp_dir().join("htan_example_checkpoint.htan");
    checkpoint::save(&path, &model.to_tensors())?;
    let back = Model::from_tensors(&checkpoint::load(&path)?)?;
    println!("{} bytes written to {}", std::fs::metadata(&path)?.len(), path.display());
    println!(
        "phi checksum {:016x} -> {:016x}",
        model.phi.checksum(),
        back.phi.checksum()
    );
    println!(
        "theta checksum {:016x} -> {:016x}",
        model.theta.checksum(),
        back.theta.checksum()
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
