//! Binary file formats: WVF1 volumes and WFCK checkpoints. Fixed-width
//! little-endian integers, f32 payloads, magic-tagged headers, and strict
//! rejection of truncated or trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use waveformer::metrics::LabelVolume;
use waveformer::model::ParamStore;
use waveformer::tensor::Tensor;

use crate::CliError;

pub const VOLUME_MAGIC: [u8; 4] = *b"WVF1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

fn io_err(path: &Path, err: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        err,
    }
}

fn bad(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Format(format!("{}: {what}", path.display()))
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self, CliError> {
        Ok(Reader {
            inner: BufReader::new(File::open(path).map_err(|e| io_err(path, e))?),
            path,
        })
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, CliError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad(self.path, format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CliError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CliError> {
        let bytes = self.bytes(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn expect_eof(&mut self) -> Result<(), CliError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(bad(self.path, "trailing bytes after payload")),
            Err(e) => Err(io_err(self.path, e)),
        }
    }
}

/// Writes a rank-4 f32 tensor as a WVF1 file.
pub fn write_volume(path: &Path, t: &Tensor<f32>) -> Result<(), CliError> {
    if t.rank() != 4 {
        return Err(CliError::Format(format!(
            "volume files hold rank-4 tensors, got rank {}",
            t.rank()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(&VOLUME_MAGIC)?;
    emit(&4u32.to_le_bytes())?;
    for &d in t.shape() {
        emit(&(d as u32).to_le_bytes())?;
    }
    emit(&DTYPE_F32.to_le_bytes())?;
    for &v in t.data() {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a WVF1 file back into a rank-4 f32 tensor.
pub fn read_volume(path: &Path) -> Result<Tensor<f32>, CliError> {
    let mut r = Reader::open(path)?;
    let magic = r.bytes(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(bad(path, "not a WVF1 volume (bad magic)"));
    }
    let ndim = r.u32("ndim")?;
    if ndim != 4 {
        return Err(bad(path, format!("expected 4 dimensions, got {ndim}")));
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        *s = r.u32(&format!("extent {i}"))? as usize;
    }
    let dtype = r.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(bad(path, format!("unsupported dtype code {dtype}")));
    }
    let n: usize = shape.iter().product();
    let data = r.f32s(n, "payload")?;
    r.expect_eof()?;
    Tensor::new(&shape, data).map_err(CliError::Core)
}

/// Writes labels as a single-channel WVF1 volume of whole-number f32s.
pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<(), CliError> {
    let [d, h, w] = labels.extent();
    let data: Vec<f32> = labels.ids().iter().map(|&v| v as f32).collect();
    let t = Tensor::new(&[1, d, h, w], data).map_err(CliError::Core)?;
    write_volume(path, &t)
}

/// Reads a single-channel WVF1 volume of whole-number voxel values back
/// into labels.
pub fn read_labels(path: &Path) -> Result<LabelVolume, CliError> {
    let t = read_volume(path)?;
    let s = t.shape();
    if s[0] != 1 {
        return Err(bad(
            path,
            format!("label volumes have 1 channel, got {}", s[0]),
        ));
    }
    let mut ids = Vec::with_capacity(t.numel());
    for &v in t.data() {
        let r = v.round();
        if !(0.0..=u32::MAX as f32).contains(&r) || (v - r).abs() > 1e-3 {
            return Err(bad(path, format!("voxel value {v} is not a class id")));
        }
        ids.push(r as u32);
    }
    LabelVolume::new([s[1], s[2], s[3]], ids).map_err(CliError::Core)
}

/// Writes every parameter tensor, in store (name) order, as a WFCK file.
pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(&CHECKPOINT_MAGIC)?;
    emit(&CHECKPOINT_VERSION.to_le_bytes())?;
    emit(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        emit(&(name.len() as u32).to_le_bytes())?;
        emit(name.as_bytes())?;
        emit(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            emit(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            emit(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a WFCK file back into a parameter store.
pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>, CliError> {
    let mut r = Reader::open(path)?;
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a WFCK checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(bad(path, format!("implausible name length {name_len}")));
        }
        let name_bytes = r.bytes(name_len, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad(path, format!("tensor {i} has a non-UTF-8 name")))?;
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(bad(path, format!("{name}: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n, &format!("payload of {name}"))?;
        let t = Tensor::new(&shape, data).map_err(CliError::Core)?;
        store.insert(&name, t).map_err(CliError::Core)?;
    }
    r.expect_eof()?;
    Ok(store)
}

/// Loads a checkpoint and verifies it holds exactly the tensors the config
/// declares, with matching shapes.
pub fn read_checkpoint_for(
    path: &Path,
    cfg: &waveformer::model::ModelConfig,
) -> Result<ParamStore<f32>, CliError> {
    let store = read_checkpoint(path)?;
    let specs = waveformer::model::param_shapes(cfg).map_err(CliError::Core)?;
    if store.len() != specs.len() {
        return Err(CliError::Format(format!(
            "{}: checkpoint has {} tensors, config declares {}",
            path.display(),
            store.len(),
            specs.len()
        )));
    }
    for spec in &specs {
        let t = store.get(&spec.name).map_err(CliError::Core)?;
        if t.shape() != &spec.shape[..] {
            return Err(CliError::Format(format!(
                "{}: tensor {} has shape {:?}, config declares {:?}",
                path.display(),
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use waveformer::prng::Prng;

    fn scratch(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("wvf-io-tests-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("scratch dir");
        dir.join(name)
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let path = scratch("trailing.wvf");
        let t: Tensor<f32> = Prng::new(1).randn(&[1, 2, 2, 2]);
        write_volume(&path, &t).expect("write");
        let mut bytes = std::fs::read(&path).expect("bytes");
        bytes.push(0);
        std::fs::write(&path, bytes).expect("extend");
        let err = read_volume(&path).expect_err("trailing byte must fail");
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn non_integer_label_values_are_rejected() {
        let path = scratch("frac.wvf");
        let t = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 0.5]).expect("tensor");
        write_volume(&path, &t).expect("write");
        let err = read_labels(&path).expect_err("fractional label must fail");
        assert!(err.to_string().contains("class id"), "{err}");
    }

    #[test]
    fn multichannel_label_files_are_rejected() {
        let path = scratch("twochan.wvf");
        let t: Tensor<f32> = Tensor::zeros(&[2, 2, 2, 2]);
        write_volume(&path, &t).expect("write");
        let err = read_labels(&path).expect_err("two channels must fail");
        assert!(err.to_string().contains("1 channel"), "{err}");
    }

    #[test]
    fn rank_and_dtype_violations_are_rejected() {
        let bad_rank = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(write_volume(&scratch("rank3.wvf"), &bad_rank).is_err());

        let path = scratch("dtype.wvf");
        let t: Tensor<f32> = Tensor::zeros(&[1, 2, 2, 2]);
        write_volume(&path, &t).expect("write");
        let mut bytes = std::fs::read(&path).expect("bytes");
        bytes[24] = 9; // dtype code lives after magic, ndim, and 4 extents
        std::fs::write(&path, bytes).expect("corrupt");
        let err = read_volume(&path).expect_err("unknown dtype must fail");
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn checkpoint_validation_catches_wrong_tensor_sets() {
        let path = scratch("wrongset.wfck");
        let mut store = ParamStore::new();
        store
            .insert("head.w", Tensor::<f32>::zeros(&[3, 8, 1, 1, 1]))
            .expect("insert");
        write_checkpoint(&path, &store).expect("write");
        let cfg = waveformer::model::ModelConfig::toy(2, 3);
        let err = read_checkpoint_for(&path, &cfg).expect_err("wrong tensor count must fail");
        assert!(err.to_string().contains("tensors"), "{err}");
    }
}
