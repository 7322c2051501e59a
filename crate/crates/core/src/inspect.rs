//! Capture and export of attention maps and selection-mask supports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::Var;
use crate::error::Result;
use crate::network::{pad_to_multiple, stage_output, Model, SIZE_MULTIPLE};
use crate::params::Ctx;
use crate::tensor::Tensor;

pub const ATTENTION_CSV: &str = "attention.csv";
pub const ATTENTION_HEADER: &str = "module,batch,row,col,att1,att2,alpha";

/// Named intermediates recorded while restoring `img` with stage `stage`.
pub fn capture(model: &Model<f32>, img: &Tensor<f32>, stage: usize) -> Result<Vec<(String, Tensor<f32>)>> {
    let padded = pad_to_multiple(img, SIZE_MULTIPLE);
    let ctx = Ctx::eval(&model.store).with_probes();
    stage_output(&ctx, model, &Var::constant(padded), stage)?;
    Ok(ctx.take_probes())
}

fn find<'a>(probes: &'a [(String, Tensor<f32>)], name: &str) -> Option<&'a Tensor<f32>> {
    probes.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// One row per attention entry of every SFEM module:
/// `module,batch,row,col,att1,att2,alpha`.
pub fn attention_csv(probes: &[(String, Tensor<f32>)]) -> String {
    let mut s = format!("{ATTENTION_HEADER}\n");
    for (name, att1) in probes {
        let Some(module) = name.strip_suffix(".att1") else {
            continue;
        };
        let (Some(att2), Some(alpha)) = (
            find(probes, &format!("{module}.att2")),
            find(probes, &format!("{module}.alpha")),
        ) else {
            continue;
        };
        let (b, c, d) = (att1.shape()[0], att1.shape()[1], att1.shape()[2]);
        let a = alpha.data()[0];
        for bi in 0..b {
            for i in 0..c {
                for j in 0..d {
                    let k = (bi * c + i) * d + j;
                    let _ = writeln!(s, "{module},{bi},{i},{j},{},{},{a}", att1.data()[k], att2.data()[k]);
                }
            }
        }
    }
    s
}

/// Row-major 0/1 matrix, one line per row, batches stacked vertically.
pub fn support_csv(mask: &Tensor<f32>) -> String {
    let cols = *mask.shape().last().expect("mask has a shape");
    let mut s = String::new();
    for row in mask.data().chunks(cols) {
        let line: Vec<&str> = row.iter().map(|&v| if v != 0.0 { "1" } else { "0" }).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Writes `attention.csv` and one `<module>.mask<i>.csv` per selection mask
/// into `dir`; returns the written paths.
pub fn write_dump(probes: &[(String, Tensor<f32>)], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let att = dir.join(ATTENTION_CSV);
    std::fs::write(&att, attention_csv(probes))?;
    written.push(att);
    for (name, t) in probes {
        if name.rsplit('.').next().is_some_and(|last| last.starts_with("mask")) {
            let p = dir.join(format!("{name}.csv"));
            std::fs::write(&p, support_csv(t))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_rows() {
        let m = Tensor::from_vec(&[1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(support_csv(&m), "1,0,1\n0,1,1\n");
    }

    #[test]
    fn attention_rows_pair_up() {
        let att1 = Tensor::from_vec(&[1, 1, 2], vec![0.25, 0.75]).unwrap();
        let att2 = Tensor::from_vec(&[1, 1, 2], vec![0.5, 0.5]).unwrap();
        let probes = vec![
            ("m.att1".to_string(), att1),
            ("m.att2".to_string(), att2),
            ("m.alpha".to_string(), Tensor::from_vec(&[1], vec![0.8]).unwrap()),
        ];
        let csv = attention_csv(&probes);
        assert_eq!(csv, format!("{ATTENTION_HEADER}\nm,0,0,0,0.25,0.5,0.8\nm,0,0,1,0.75,0.5,0.8\n"));
    }
}
