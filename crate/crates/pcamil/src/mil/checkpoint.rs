//! The `MILM` model checkpoint container and the training-history CSV.
//!
//! Layout (integers and floats little-endian):
//! magic `MILM`, version u32 (= 1), then the config fields
//! `d_in, d_hidden, d_att, n_heads, epochs` as u32, the eigenvalue-scaling
//! flag as one byte, `lr, beta1, beta2, adam_eps, label_smoothing` as f64,
//! `seed` as u64, followed by the eight parameter tensors in the order
//! `W_f, b_f, W1, W4, W2, W3, W5, b5`, each framed as rows u32, cols u32,
//! and a rows*cols f64 payload (vectors use rows = 1; the scalar is 1x1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::{MilConfig, MilError, MilParams};
use crate::data::DataError;
use crate::mil::train::TrainingHistory;

const MODEL_MAGIC: [u8; 4] = *b"MILM";
const MODEL_VERSION: u32 = 1;

pub fn save_checkpoint(
    params: &MilParams,
    cfg: &MilConfig,
    path: &Path,
) -> Result<(), MilError> {
    let file = File::create(path).map_err(DataError::Io)?;
    let mut writer = BufWriter::new(file);
    encode_checkpoint(params, cfg, &mut writer)?;
    writer.flush().map_err(DataError::Io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MilParams, MilConfig), MilError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    decode_checkpoint(BufReader::new(file))
}

pub fn encode_checkpoint<W: Write>(
    params: &MilParams,
    cfg: &MilConfig,
    mut writer: W,
) -> Result<(), MilError> {
    if !params.matches_config(cfg) {
        return Err(MilError::ShapeMismatch(
            "parameters do not match the config".into(),
        ));
    }
    let io = DataError::Io;
    writer.write_all(&MODEL_MAGIC).map_err(io)?;
    writer.write_u32::<LittleEndian>(MODEL_VERSION).map_err(io)?;
    for v in [cfg.d_in, cfg.d_hidden, cfg.d_att, cfg.n_heads, cfg.epochs] {
        writer.write_u32::<LittleEndian>(v as u32).map_err(io)?;
    }
    writer
        .write_u8(cfg.scale_instances_by_eigenvalue as u8)
        .map_err(io)?;
    for v in [cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.label_smoothing] {
        writer.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    writer.write_u64::<LittleEndian>(cfg.seed).map_err(io)?;

    let mut write_tensor = |rows: usize, cols: usize, values: &[f64]| -> Result<(), MilError> {
        writer.write_u32::<LittleEndian>(rows as u32).map_err(io)?;
        writer.write_u32::<LittleEndian>(cols as u32).map_err(io)?;
        for &v in values {
            writer.write_f64::<LittleEndian>(v).map_err(io)?;
        }
        Ok(())
    };
    write_tensor(
        params.w_f.nrows(),
        params.w_f.ncols(),
        params.w_f.as_slice().expect("standard layout"),
    )?;
    write_tensor(1, params.b_f.len(), params.b_f.as_slice().expect("standard layout"))?;
    write_tensor(
        params.w1.nrows(),
        params.w1.ncols(),
        params.w1.as_slice().expect("standard layout"),
    )?;
    write_tensor(
        params.w4.nrows(),
        params.w4.ncols(),
        params.w4.as_slice().expect("standard layout"),
    )?;
    write_tensor(
        params.w2.nrows(),
        params.w2.ncols(),
        params.w2.as_slice().expect("standard layout"),
    )?;
    write_tensor(
        params.w3.nrows(),
        params.w3.ncols(),
        params.w3.as_slice().expect("standard layout"),
    )?;
    write_tensor(1, params.w5.len(), params.w5.as_slice().expect("standard layout"))?;
    write_tensor(1, 1, &[params.b5])?;
    Ok(())
}

pub fn decode_checkpoint<R: Read>(mut reader: R) -> Result<(MilParams, MilConfig), MilError> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(eof_as_truncated)?;
    if magic != MODEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: MODEL_MAGIC,
        }
        .into());
    }
    let version = read_u32(&mut reader)?;
    if version != MODEL_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        }
        .into());
    }
    let d_in = read_u32(&mut reader)? as usize;
    let d_hidden = read_u32(&mut reader)? as usize;
    let d_att = read_u32(&mut reader)? as usize;
    let n_heads = read_u32(&mut reader)? as usize;
    let epochs = read_u32(&mut reader)? as usize;
    let mut flag = [0u8; 1];
    reader.read_exact(&mut flag).map_err(eof_as_truncated)?;
    if flag[0] > 1 {
        return Err(MilError::InvalidConfig(format!(
            "scaling flag byte must be 0 or 1, found {}",
            flag[0]
        )));
    }
    let lr = read_f64(&mut reader)?;
    let beta1 = read_f64(&mut reader)?;
    let beta2 = read_f64(&mut reader)?;
    let adam_eps = read_f64(&mut reader)?;
    let label_smoothing = read_f64(&mut reader)?;
    let seed = reader
        .read_u64::<LittleEndian>()
        .map_err(eof_as_truncated)?;

    let cfg = MilConfig {
        d_in,
        d_hidden,
        d_att,
        n_heads,
        lr,
        beta1,
        beta2,
        adam_eps,
        epochs,
        label_smoothing,
        seed,
        scale_instances_by_eigenvalue: flag[0] == 1,
    };
    cfg.validate()?;

    // Tensor frames must agree with the config; each frame's shape is
    // checked before its payload is trusted.
    let w_f = read_matrix(&mut reader, d_hidden, d_in)?;
    let b_f = read_vector(&mut reader, d_hidden)?;
    let w1 = read_matrix(&mut reader, d_att, d_hidden)?;
    let w4 = read_matrix(&mut reader, d_att, d_hidden)?;
    let w2 = read_matrix(&mut reader, n_heads, d_att)?;
    let w3 = read_matrix(&mut reader, n_heads, d_att)?;
    let w5 = read_vector(&mut reader, n_heads * d_hidden)?;
    let b5 = read_vector(&mut reader, 1)?[0];

    let mut rest = Vec::new();
    reader
        .take(1024)
        .read_to_end(&mut rest)
        .map_err(DataError::Io)?;
    if !rest.is_empty() {
        return Err(DataError::TrailingBytes(rest.len() as u64).into());
    }

    let params = MilParams {
        w_f,
        b_f,
        w1,
        w4,
        w2,
        w3,
        w5,
        b5,
    };
    if !params.all_finite() {
        return Err(MilError::NonFiniteActivation);
    }
    Ok((params, cfg))
}

fn read_matrix<R: Read>(
    reader: &mut R,
    want_rows: usize,
    want_cols: usize,
) -> Result<Array2<f64>, MilError> {
    let rows = read_u32(reader)? as usize;
    let cols = read_u32(reader)? as usize;
    if rows != want_rows || cols != want_cols {
        return Err(MilError::ShapeMismatch(format!(
            "tensor frame is {rows}x{cols}, config expects {want_rows}x{want_cols}"
        )));
    }
    let mut values = Vec::with_capacity(rows.min(1 << 16) * cols.min(1 << 16));
    for _ in 0..rows * cols {
        values.push(read_f64(reader)?);
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn read_vector<R: Read>(reader: &mut R, want_len: usize) -> Result<Array1<f64>, MilError> {
    let m = read_matrix(reader, 1, want_len)?;
    Ok(m.into_shape(want_len).expect("one row"))
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, MilError> {
    reader.read_u32::<LittleEndian>().map_err(eof_as_truncated)
}

fn read_f64<R: Read>(reader: &mut R) -> Result<f64, MilError> {
    reader.read_f64::<LittleEndian>().map_err(eof_as_truncated)
}

fn eof_as_truncated(e: std::io::Error) -> MilError {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload {
            expected: 0,
            actual: 0,
        }
        .into(),
        _ => MilError::Data(DataError::Io(e)),
    }
}

/// Writes the history CSV: `epoch,loss,acc_overall,acc_msi`.
pub fn write_history(history: &TrainingHistory, path: &Path) -> Result<(), MilError> {
    let mut out = String::from("epoch,loss,acc_overall,acc_msi\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            e.epoch, e.mean_loss, e.acc_overall, e.acc_msi
        ));
    }
    std::fs::write(path, out).map_err(DataError::Io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::init_params;

    fn cfg() -> MilConfig {
        MilConfig {
            d_hidden: 6,
            d_att: 4,
            seed: 42,
            ..MilConfig::for_input_dim(5)
        }
    }

    #[test]
    fn checkpoint_roundtrips_exactly() {
        let cfg = cfg();
        let params = init_params(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.milm");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (back_params, back_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(params, back_params);
        assert_eq!(cfg, back_cfg);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = cfg();
        let params = init_params(&cfg);
        let mut buf = Vec::new();
        encode_checkpoint(&params, &cfg, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(matches!(
            decode_checkpoint(bad.as_slice()),
            Err(MilError::Data(DataError::BadMagic { .. }))
        ));

        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(MilError::Data(DataError::TruncatedPayload { .. }))
        ));

        let mut trailing = buf.clone();
        trailing.push(1);
        assert!(matches!(
            decode_checkpoint(trailing.as_slice()),
            Err(MilError::Data(DataError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn history_csv_has_the_contracted_header() {
        let history = TrainingHistory {
            epochs: vec![crate::mil::EpochStats {
                epoch: 1,
                mean_loss: 0.5,
                acc_overall: 0.75,
                acc_msi: 0.5,
                checkpointed: false,
            }],
            checkpoint_epoch: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss,acc_overall,acc_msi\n"));
        assert!(text.contains("1,0.500000,0.750000,0.500000"));
    }
}
