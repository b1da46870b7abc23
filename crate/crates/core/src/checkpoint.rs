//! Versioned binary checkpoints of the learnable state. Round trips are
//! bit-exact: every f64 is stored as its little-endian bit pattern.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelState, Routing};
use crate::prompts::{ClassPosition, PromptBank, WeightRouter};
use crate::synth::EncoderDims;
use crate::trainer::SeedBlock;

const MAGIC: &[u8; 4] = b"MXCK";
const VERSION: u16 = 1;

/// Everything needed to rebuild the evaluation pipeline: the learnable
/// tensors plus the dimensions and seeds of the world they were trained
/// in.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub enc_dims: EncoderDims,
    pub n_classes: usize,
    pub logit_scale: f64,
    pub seeds: SeedBlock,
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn read_floats(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    (0..count).map(|_| Ok(f64::from_bits(r.read_u64::<LittleEndian>()?))).collect()
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bank = &ck.model.bank;
    let router = &ck.model.router;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    for dim in [
        ck.enc_dims.image_dim,
        ck.enc_dims.hidden_dim,
        ck.enc_dims.feature_dim,
        ck.enc_dims.token_dim,
        ck.n_classes,
        bank.prompt_count(),
        bank.ctx_len,
        router.hidden_dim,
    ] {
        w.write_u32::<LittleEndian>(dim as u32)?;
    }
    w.write_u8(match ck.model.routing {
        Routing::Uniform => 0,
        Routing::Learned => 1,
    })?;
    w.write_u64::<LittleEndian>(router.temperature.to_bits())?;
    w.write_u64::<LittleEndian>(ck.logit_scale.to_bits())?;
    for seed in [ck.seeds.data, ck.seeds.init, ck.seeds.attack] {
        w.write_u64::<LittleEndian>(seed)?;
    }
    for ctx in bank.contexts() {
        write_tensor(&mut w, ctx)?;
    }
    for p in router.params() {
        write_tensor(&mut w, p)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let [image_dim, hidden_dim, feature_dim, token_dim, n_classes, prompt_count, ctx_len, router_hidden] =
        dims;
    let routing = match r.read_u8()? {
        0 => Routing::Uniform,
        1 => Routing::Learned,
        x => return Err(Error::Checkpoint(format!("unknown routing tag {x}"))),
    };
    let temperature = f64::from_bits(r.read_u64::<LittleEndian>()?);
    let logit_scale = f64::from_bits(r.read_u64::<LittleEndian>()?);
    let seeds = SeedBlock {
        data: r.read_u64::<LittleEndian>()?,
        init: r.read_u64::<LittleEndian>()?,
        attack: r.read_u64::<LittleEndian>()?,
    };

    let mut bank = PromptBank::init(prompt_count, ctx_len, token_dim, 0)
        .map_err(|e| Error::Checkpoint(format!("invalid bank dims: {e}")))?;
    debug_assert_eq!(bank.class_position, ClassPosition::End);
    for ctx in bank.contexts_mut() {
        let data = read_floats(&mut r, ctx_len * token_dim)?;
        ctx.data_mut().copy_from_slice(&data);
    }
    let mut router = WeightRouter::zeros(feature_dim, router_hidden, prompt_count, temperature);
    for p in router.params_mut() {
        let data = read_floats(&mut r, p.numel())?;
        p.data_mut().copy_from_slice(&data);
    }

    Ok(Checkpoint {
        model: ModelState { bank, router, routing },
        enc_dims: EncoderDims { image_dim, hidden_dim, feature_dim, token_dim },
        n_classes,
        logit_scale,
        seeds,
    })
}
