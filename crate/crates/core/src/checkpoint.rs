//! Binary checkpoint format and the single-tensor artifact codec.
//!
//! Checkpoint layout ("FNDS"):
//!   magic "FNDS" | version u32 | layer_count u32 |
//!   param_record_count u32 | records | bn_record_count u32 | records
//! where each record is
//!   layer_index u32 | kind_tag u8 | role u8 | ndim u32 | dims u32* | f32* payload
//! all little-endian, payload always 32-bit floats regardless of the runtime
//! precision. A sidecar text manifest (`<path>.manifest.txt`) lists the layer
//! specs for human inspection.
//!
//! Tensor artifacts ("FNDT") carry one tensor:
//!   magic "FNDT" | version u32 | ndim u32 | dims u32* | f32* payload

use crate::error::{Error, Result};
use crate::nn::network::{LayerSpec, LayerState, Network};
use crate::tensor::{Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"FNDS";
const TENSOR_MAGIC: &[u8; 4] = b"FNDT";
const VERSION: u32 = 1;

const ROLE_WEIGHTS: u8 = 0;
const ROLE_BIAS: u8 = 1;
const ROLE_GAMMA: u8 = 2;
const ROLE_BETA: u8 = 3;
const ROLE_RUNNING_MEAN: u8 = 4;
const ROLE_RUNNING_VAR: u8 = 5;

fn kind_tag(layer: &LayerSpec) -> u8 {
    match layer {
        LayerSpec::Conv2d { .. } => 1,
        LayerSpec::MaxPool2d { .. } => 2,
        LayerSpec::FullyConnected { .. } => 3,
        LayerSpec::BatchNorm { .. } => 4,
        LayerSpec::Relu => 5,
        LayerSpec::Dropout { .. } => 6,
        LayerSpec::SoftmaxOutput => 7,
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_record<T: Scalar>(
    w: &mut impl Write,
    layer: u32,
    tag: u8,
    role: u8,
    tensor: &Tensor<T>,
) -> std::io::Result<()> {
    write_u32(w, layer)?;
    w.write_all(&[tag, role])?;
    write_u32(w, tensor.shape().len() as u32)?;
    for &d in tensor.shape() {
        write_u32(w, d as u32)?;
    }
    for v in tensor.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

struct RecordHeader {
    layer: usize,
    tag: u8,
    role: u8,
    shape: Vec<usize>,
}

fn read_record<T: Scalar>(r: &mut impl Read) -> Result<(RecordHeader, Tensor<T>)> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated record: {e}"));
    let layer = read_u32(r).map_err(io)? as usize;
    let mut tb = [0u8; 2];
    r.read_exact(&mut tb).map_err(io)?;
    let ndim = read_u32(r).map_err(io)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r).map_err(io)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(io)?;
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let tensor = Tensor::new(shape.clone(), data)?;
    Ok((RecordHeader { layer, tag: tb[0], role: tb[1], shape }, tensor))
}

/// Writes the network's parameters and BN running statistics, plus the
/// sidecar manifest.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.write_all(CKPT_MAGIC).map_err(io)?;
    write_u32(&mut w, VERSION).map_err(io)?;
    write_u32(&mut w, net.layers().len() as u32).map_err(io)?;

    let mut params: Vec<(u32, u8, u8, &Tensor<T>)> = Vec::new();
    let mut bn_stats: Vec<(u32, u8, u8, &Tensor<T>)> = Vec::new();
    for (i, (layer, state)) in net.layers().iter().zip(net.states()).enumerate() {
        let tag = kind_tag(layer);
        match state {
            LayerState::None => {}
            LayerState::Params { weights, bias } => {
                params.push((i as u32, tag, ROLE_WEIGHTS, weights));
                if let Some(b) = bias {
                    params.push((i as u32, tag, ROLE_BIAS, b));
                }
            }
            LayerState::BatchNorm(bn) => {
                params.push((i as u32, tag, ROLE_GAMMA, &bn.gamma));
                params.push((i as u32, tag, ROLE_BETA, &bn.beta));
                bn_stats.push((i as u32, tag, ROLE_RUNNING_MEAN, &bn.running_mean));
                bn_stats.push((i as u32, tag, ROLE_RUNNING_VAR, &bn.running_var));
            }
        }
    }
    write_u32(&mut w, params.len() as u32).map_err(io)?;
    for (layer, tag, role, tensor) in params {
        write_record(&mut w, layer, tag, role, tensor).map_err(io)?;
    }
    write_u32(&mut w, bn_stats.len() as u32).map_err(io)?;
    for (layer, tag, role, tensor) in bn_stats {
        write_record(&mut w, layer, tag, role, tensor).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let manifest_path = sidecar_manifest_path(path);
    let mut manifest = String::new();
    manifest.push_str(&format!("checkpoint format FNDS v{VERSION}, {}-bit runtime\n", T::BITS));
    manifest.push_str(&format!("layers: {}\n", net.layers().len()));
    for (i, layer) in net.layers().iter().enumerate() {
        manifest.push_str(&format!("{:>3}  {:?}\n", i, layer));
    }
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

pub fn sidecar_manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.txt");
    std::path::PathBuf::from(os)
}

/// Loads parameters into an architecture-compatible network, validating
/// layer count, kind tags, and tensor shapes.
pub fn load_checkpoint<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let layer_count = read_u32(&mut r).map_err(io)? as usize;
    if layer_count != net.layers().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {layer_count} layers, network has {}",
            net.layers().len()
        )));
    }

    let apply = |net: &mut Network<T>, h: &RecordHeader, tensor: Tensor<T>| -> Result<()> {
        let layer = net
            .layers()
            .get(h.layer)
            .ok_or_else(|| Error::Checkpoint(format!("layer index {} out of range", h.layer)))?;
        if kind_tag(layer) != h.tag {
            return Err(Error::Checkpoint(format!(
                "layer {} kind tag {} does not match network ({})",
                h.layer,
                h.tag,
                kind_tag(layer)
            )));
        }
        let state = &mut net.states_mut()[h.layer];
        let slot: &mut Tensor<T> = match (state, h.role) {
            (LayerState::Params { weights, .. }, ROLE_WEIGHTS) => weights,
            (LayerState::Params { bias: Some(b), .. }, ROLE_BIAS) => b,
            (LayerState::BatchNorm(bn), ROLE_GAMMA) => &mut bn.gamma,
            (LayerState::BatchNorm(bn), ROLE_BETA) => &mut bn.beta,
            (LayerState::BatchNorm(bn), ROLE_RUNNING_MEAN) => &mut bn.running_mean,
            (LayerState::BatchNorm(bn), ROLE_RUNNING_VAR) => &mut bn.running_var,
            _ => {
                return Err(Error::Checkpoint(format!(
                    "layer {} has no tensor of role {}",
                    h.layer, h.role
                )))
            }
        };
        if slot.shape() != h.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "layer {} role {}: shape {:?} does not match network {:?}",
                h.layer,
                h.role,
                h.shape,
                slot.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    };

    let param_count = read_u32(&mut r).map_err(io)? as usize;
    for _ in 0..param_count {
        let (h, t) = read_record::<T>(&mut r)?;
        apply(net, &h, t)?;
    }
    let bn_count = read_u32(&mut r).map_err(io)? as usize;
    for _ in 0..bn_count {
        let (h, t) = read_record::<T>(&mut r)?;
        apply(net, &h, t)?;
    }
    Ok(())
}

/// Writes one tensor as a little-endian f32 artifact.
pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    write_u32(&mut w, VERSION).map_err(io)?;
    write_u32(&mut w, tensor.shape().len() as u32).map_err(io)?;
    for &d in tensor.shape() {
        write_u32(&mut w, d as u32).map_err(io)?;
    }
    for v in tensor.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let ndim = read_u32(&mut r).map_err(io)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(io)?;
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::build_local;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_f32_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("local.ckpt");
        let net = build_local::<f32>(16, 0.5, 42).unwrap();
        save_checkpoint(&net, &path).unwrap();

        let mut restored = build_local::<f32>(16, 0.5, 999).unwrap();
        load_checkpoint(&mut restored, &path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::from_fn(vec![2, 3, 16, 16], |_| rng.gen_range(0.0..255.0));
        let a = net.forward_infer(&x).unwrap();
        let b = restored.forward_infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn magic_bytes_lead_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = build_local::<f32>(16, 0.5, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FNDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn sidecar_manifest_lists_layers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = build_local::<f32>(16, 0.5, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let manifest = std::fs::read_to_string(sidecar_manifest_path(&path)).unwrap();
        assert!(manifest.contains("FNDS"));
        assert!(manifest.contains("Conv2d"));
        assert!(manifest.contains("SoftmaxOutput"));
    }

    #[test]
    fn wrong_architecture_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = build_local::<f32>(16, 0.5, 1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        // patch side differs -> FC shapes differ
        let mut other = build_local::<f32>(32, 0.5, 1).unwrap();
        let err = load_checkpoint(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let mut net = build_local::<f32>(16, 0.5, 1).unwrap();
        assert!(load_checkpoint(&mut net, &path).is_err());
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let mut net = build_local::<f32>(16, 0.5, 1).unwrap();
        let err = load_checkpoint(&mut net, Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn f64_network_loads_f32_checkpoint_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = build_local::<f32>(16, 0.5, 7).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let mut wide = build_local::<f64>(16, 0.5, 0).unwrap();
        load_checkpoint(&mut wide, &path).unwrap();
        // widening is exact: narrow the loaded weights back and compare
        match (&net.states()[0], &wide.states()[0]) {
            (
                crate::nn::network::LayerState::Params { weights: a, .. },
                crate::nn::network::LayerState::Params { weights: b, .. },
            ) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(*x, *y as f32);
                }
            }
            _ => panic!("expected conv params"),
        }
    }

    #[test]
    fn tensor_artifact_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::<f32>::from_fn(vec![3, 5, 4], |_| rng.gen_range(-10.0..10.0));
        write_tensor(&t, &path).unwrap();
        let back: Tensor<f32> = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}
