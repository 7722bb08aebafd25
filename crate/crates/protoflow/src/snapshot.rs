//! Binary model snapshots: magic, version tag, prototype section, the
//! velocity network, and the scoring heads, all little-endian with raw
//! 64-bit parameter arrays. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::flow::{FlowModel, NoiseSchedule};
use crate::gmm::GmPrototype;
use crate::nn::{Activation, Mlp};
use crate::scoring::ScoringHeads;
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PFLOWMDL";
const VERSION: u32 = 1;

fn write_mlp<W: Write>(out: &mut W, mlp: &Mlp) -> Result<()> {
    out.write_u32::<LittleEndian>(mlp.sizes().len() as u32)?;
    for &s in mlp.sizes() {
        out.write_u32::<LittleEndian>(s as u32)?;
    }
    out.write_u8(match mlp.activation() {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    })?;
    let mut err = None;
    mlp.for_each_param(&mut |p: &Tensor| {
        if err.is_some() {
            return;
        }
        for &v in p.data() {
            if let Err(e) = out.write_f64::<LittleEndian>(v) {
                err = Some(e);
                return;
            }
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn read_mlp<R: Read>(input: &mut R, path: &Path) -> Result<Mlp> {
    let n_sizes = input.read_u32::<LittleEndian>()? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(parse_err(path, format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(input.read_u32::<LittleEndian>()? as usize);
    }
    if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
        return Err(parse_err(path, format!("implausible layer sizes {sizes:?}")));
    }
    let activation = match input.read_u8()? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(parse_err(path, format!("unknown activation tag {other}"))),
    };
    let mut mlp = Mlp::new(&sizes, activation);
    let mut err: Option<Error> = None;
    mlp.for_each_param_mut(&mut |p: &mut Tensor| {
        if err.is_some() {
            return;
        }
        for v in p.data_mut() {
            match input.read_f64::<LittleEndian>() {
                Ok(x) => *v = x,
                Err(e) => {
                    err = Some(e.into());
                    return;
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(mlp),
    }
}

fn parse_err(path: &Path, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg,
    }
}

/// Writes the model and heads to `path`.
pub fn save_model(model: &FlowModel, heads: &ScoringHeads, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;

    // prototype section
    let proto = &model.prototype;
    out.write_u32::<LittleEndian>(proto.k() as u32)?;
    out.write_u32::<LittleEndian>(proto.dim() as u32)?;
    for &w in proto.weights() {
        out.write_f64::<LittleEndian>(w)?;
    }
    for &m in proto.means().data() {
        out.write_f64::<LittleEndian>(m)?;
    }
    out.write_f64::<LittleEndian>(proto.std())?;

    // schedule and transport constants
    out.write_u32::<LittleEndian>(model.psi_steps as u32)?;
    out.write_u8(u8::from(model.one_step_psi))?;
    out.write_f64::<LittleEndian>(model.t_min)?;

    write_mlp(&mut out, &model.velocity_net)?;
    write_mlp(&mut out, &heads.patch_head)?;
    write_mlp(&mut out, &heads.pooled_head)?;
    write_mlp(&mut out, &heads.residual_head)?;
    out.write_f64::<LittleEndian>(heads.global_gain.item())?;
    out.write_f64::<LittleEndian>(heads.global_bias.item())?;
    out.flush()?;
    Ok(())
}

/// Reads a model and heads back; validates magic, version, and shapes.
pub fn load_model(path: &Path) -> Result<(FlowModel, ScoringHeads)> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(parse_err(path, "not a model snapshot (bad magic)".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            expected: VERSION,
            got: version,
        });
    }

    let k = input.read_u32::<LittleEndian>()? as usize;
    let dim = input.read_u32::<LittleEndian>()? as usize;
    if k == 0 || dim == 0 || k > 1 << 20 || dim > 1 << 20 {
        return Err(parse_err(path, format!("implausible prototype shape k={k}, dim={dim}")));
    }
    let mut weights = vec![0.0; k];
    for w in &mut weights {
        *w = input.read_f64::<LittleEndian>()?;
    }
    let mut means = vec![0.0; k * dim];
    for m in &mut means {
        *m = input.read_f64::<LittleEndian>()?;
    }
    let std = input.read_f64::<LittleEndian>()?;
    let prototype = GmPrototype::new(weights, Tensor::matrix(k, dim, means)?, std)?;

    let psi_steps = input.read_u32::<LittleEndian>()? as usize;
    let one_step_psi = input.read_u8()? != 0;
    let t_min = input.read_f64::<LittleEndian>()?;

    let velocity_net = read_mlp(&mut input, path)?;
    if velocity_net.input_dim() != dim + 1 || velocity_net.output_dim() != k + k * dim {
        return Err(parse_err(
            path,
            format!(
                "velocity network shape {:?} does not match prototype (k={k}, dim={dim})",
                velocity_net.sizes()
            ),
        ));
    }
    let patch_head = read_mlp(&mut input, path)?;
    let pooled_head = read_mlp(&mut input, path)?;
    let residual_head = read_mlp(&mut input, path)?;
    let gain = input.read_f64::<LittleEndian>()?;
    let bias = input.read_f64::<LittleEndian>()?;

    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(parse_err(path, "trailing bytes after snapshot".into()));
    }

    let model = FlowModel {
        velocity_net,
        schedule: NoiseSchedule,
        prototype,
        psi_steps,
        one_step_psi,
        t_min,
    };
    let heads = ScoringHeads {
        patch_head,
        pooled_head,
        residual_head,
        global_gain: Tensor::scalar(gain),
        global_bias: Tensor::scalar(bias),
    };
    Ok((model, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_pair(seed: u64) -> (FlowModel, ScoringHeads) {
        let mut rng = rng_from_seed(seed);
        let k = 3;
        let dim = 4;
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let means: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let proto = GmPrototype::new(
            w,
            Tensor::matrix(k, dim, means).unwrap(),
            rng.gen_range(0.2..0.9),
        )
        .unwrap();
        let mut model = FlowModel::new(proto, &[6, 5], 8, &mut rng);
        model.velocity_net.init_fan_in(&mut rng, false);
        let mut heads = ScoringHeads::new(dim, dim, &[4], &mut rng);
        heads.patch_head.init_fan_in(&mut rng, false);
        heads.global_gain.data_mut()[0] = rng.gen_range(-1.0..1.0);
        (model, heads)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (model, heads) = random_pair(11);
        save_model(&model, &heads, &path).unwrap();
        let (m2, h2) = load_model(&path).unwrap();
        assert_eq!(model, m2);
        assert_eq!(heads, h2);

        // saving the loaded pair reproduces the same bytes
        let path2 = dir.path().join("model2.bin");
        save_model(&m2, &h2, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn parameter_count_is_stable_across_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (model, heads) = random_pair(12);
        save_model(&model, &heads, &path).unwrap();
        let (m2, h2) = load_model(&path).unwrap();
        assert_eq!(
            model.velocity_net.param_count(),
            m2.velocity_net.param_count()
        );
        assert_eq!(heads.patch_head.param_count(), h2.patch_head.param_count());
    }

    #[test]
    fn bad_magic_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC___").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::FormatVersion { got: 99, .. })
        ));
    }

    #[test]
    fn truncated_snapshots_error_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (model, heads) = random_pair(13);
        save_model(&model, &heads, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }
}
