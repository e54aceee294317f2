//! Latent-code export for plotting the topological latent space.

use std::io::Write;

use super::{Dataset, Result};
use crate::autodiff::Tape;
use crate::models::{Bound, Reg, TopoAeModel};

/// Writes `label,z0,...,z{d-1}` rows, one per sample, and returns the row
/// count. Values are printed in shortest round-trip form, so parsing them
/// back recovers the exact encoder output.
pub fn export_latents(topoae: &TopoAeModel, dataset: &Dataset, path: &std::path::Path) -> Result<usize> {
    let d = topoae.config.d_topo;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "label")?;
    for k in 0..d {
        write!(out, ",z{k}")?;
    }
    writeln!(out)?;

    let mut written = 0;
    for start in (0..dataset.len()).step_by(256) {
        let indices: Vec<usize> = (start..(start + 256).min(dataset.len())).collect();
        let (x, labels) = dataset.gather(&indices);
        let mut tape = Tape::new();
        let xt = tape.constant(&x).expect("batch is finite");
        let z = topoae
            .encode(&mut tape, &xt, Reg::Frozen, &mut Bound::default())
            .expect("encoder accepts image batches");
        for (row, label) in labels.iter().enumerate() {
            write!(out, "{label}")?;
            for k in 0..d {
                write!(out, ",{}", z.data()[row * d + k])?;
            }
            writeln!(out)?;
            written += 1;
        }
    }
    out.flush()?;
    Ok(written)
}
