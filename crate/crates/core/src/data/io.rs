//! Dataset files: magic `HTANDATA`, `u32` length of the echoed spec text,
//! the spec text, then a tensor container holding `inputs`, `labels` and
//! `regimes`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{RegimeSwitchingSpec, SequenceBatch};
use crate::checkpoint;
use crate::config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"HTANDATA";

pub fn save_dataset(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let s = &batch.spec;
    let (b, n, d, t) = (s.sequences, s.seq_len, s.input_dim, s.tasks);
    let text = config::render("data", s);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let tensors = vec![
        ("inputs".to_string(), Tensor::new(vec![b, n, d], batch.inputs.clone())?),
        ("labels".to_string(), Tensor::new(vec![t, b, n], as_f64(&batch.labels))?),
        ("regimes".to_string(), Tensor::new(vec![b, n], as_f64(&batch.regimes))?),
    ];
    checkpoint::write_container(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

fn to_indices(t: &Tensor, name: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("{name} holds non-index value {x}")))
            }
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<SequenceBatch> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut text)
        .map_err(|_| Error::Format("truncated dataset spec".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("dataset spec is not UTF-8".into()))?;
    let mut spec = RegimeSwitchingSpec::default();
    config::apply(&config::parse(&text)?, "data", &mut spec)?;
    spec.validate()?;
    let mut tensors = checkpoint::read_container(r)?;
    let mut take = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("dataset lacks '{name}'")))?;
        let t = tensors.swap_remove(i).1;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let (b, n, d, tk) = (spec.sequences, spec.seq_len, spec.input_dim, spec.tasks);
    let inputs = take("inputs", vec![b, n, d])?.into_data();
    let labels = to_indices(&take("labels", vec![tk, b, n])?, "labels")?;
    let regimes = to_indices(&take("regimes", vec![b, n])?, "regimes")?;
    if labels.iter().any(|&l| l >= spec.classes) || regimes.iter().any(|&r| r >= spec.regimes()) {
        return Err(Error::Format("label or regime out of range".into()));
    }
    Ok(SequenceBatch {
        spec,
        inputs,
        labels,
        regimes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn round_trip() {
        let spec = RegimeSwitchingSpec {
            sequences: 5,
            seq_len: 4,
            ..Default::default()
        };
        let d = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.htd");
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }
}
