//! Versioned checkpoint files: config snapshot, epoch counter, master seed,
//! generator and discriminator parameters and both Adam states. Identical
//! training state serializes to byte-identical files.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use facegan_nn::adam::AdamParamState;
use facegan_nn::blob::{decode_params_into, encode_params, Blob, BlobWriter, Dec, Enc};
use facegan_nn::{Adam, ParamStore};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::model::{Generator, MultiScaleDiscriminator};

fn encode_adam(opt: &Adam, store: &ParamStore) -> Vec<u8> {
    let mut e = Enc::new();
    e.f64(opt.beta1);
    e.f64(opt.beta2);
    e.u64(opt.states.len() as u64);
    for id in store.ids() {
        let st = &opt.states[id.0];
        e.str(&store.entry(id).name);
        e.u64(st.t);
        e.f64s(&st.m);
        e.f64s(&st.v);
    }
    e.0
}

fn decode_adam(payload: &[u8], store: &ParamStore) -> Result<Adam> {
    let mut d = Dec::new(payload);
    let beta1 = d.f64()?;
    let beta2 = d.f64()?;
    let count = d.u64()? as usize;
    if count != store.len() {
        return Err(PipelineError::Checkpoint(facegan_nn::NnError::Format(
            format!("optimizer has {count} states, model has {}", store.len()),
        )));
    }
    let mut opt = Adam::new(store, beta1, beta2);
    for _ in 0..count {
        let name = d.str().map_err(PipelineError::Checkpoint)?;
        let id = store.lookup(&name).ok_or_else(|| {
            PipelineError::Checkpoint(facegan_nn::NnError::Format(format!(
                "optimizer state for unknown parameter '{name}'"
            )))
        })?;
        let t = d.u64().map_err(PipelineError::Checkpoint)?;
        let m = d.f64s().map_err(PipelineError::Checkpoint)?;
        let v = d.f64s().map_err(PipelineError::Checkpoint)?;
        opt.states[id.0] = AdamParamState { t, m, v };
    }
    Ok(opt)
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    path: &Path,
    cfg: &PipelineConfig,
    epoch: u32,
    gen_store: &ParamStore,
    disc_store: &ParamStore,
    gen_opt: &Adam,
    disc_opt: &Adam,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BlobWriter::new(BufWriter::new(file))?;
    w.block(b"CONF", cfg.serialize().as_bytes())?;
    let mut stat = Enc::new();
    stat.u64(epoch as u64);
    stat.u64(cfg.train.seed);
    w.block(b"STAT", &stat.0)?;
    w.block(b"PGEN", &encode_params(gen_store))?;
    w.block(b"PDSC", &encode_params(disc_store))?;
    w.block(b"AGEN", &encode_adam(gen_opt, gen_store))?;
    w.block(b"ADSC", &encode_adam(disc_opt, disc_store))?;
    w.finish()?;
    Ok(())
}

pub struct FullCheckpoint {
    pub cfg: PipelineConfig,
    pub epoch: u32,
    pub gen: Generator,
    pub gen_store: ParamStore,
    pub disc: MultiScaleDiscriminator,
    pub disc_store: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
}

fn read_blob(path: &Path) -> Result<Blob> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(Blob::read(BufReader::new(file))?)
}

fn read_header(blob: &Blob) -> Result<(PipelineConfig, u32)> {
    let conf = std::str::from_utf8(blob.require("CONF")?)
        .map_err(|_| PipelineError::Checkpoint(facegan_nn::NnError::Format("non-utf8 config".into())))?;
    let cfg = PipelineConfig::parse(conf)?;
    let mut d = Dec::new(blob.require("STAT")?);
    let epoch = d.u64()? as u32;
    let seed = d.u64()?;
    if seed != cfg.train.seed {
        return Err(PipelineError::Checkpoint(facegan_nn::NnError::Format(
            "seed mismatch between STAT and config snapshot".into(),
        )));
    }
    Ok((cfg, epoch))
}

/// Load everything needed to resume training.
pub fn load_full(path: &Path) -> Result<FullCheckpoint> {
    let blob = read_blob(path)?;
    let (cfg, epoch) = read_header(&blob)?;
    let mut gen_store = ParamStore::new();
    let gen = Generator::new(&mut gen_store, cfg.gen)?;
    decode_params_into(&mut gen_store, blob.require("PGEN")?)?;
    let mut disc_store = ParamStore::new();
    let disc = MultiScaleDiscriminator::new(&mut disc_store, cfg.disc, cfg.gen.image_size)?;
    decode_params_into(&mut disc_store, blob.require("PDSC")?)?;
    let gen_opt = decode_adam(blob.require("AGEN")?, &gen_store)?;
    let disc_opt = decode_adam(blob.require("ADSC")?, &disc_store)?;
    Ok(FullCheckpoint {
        cfg,
        epoch,
        gen,
        gen_store,
        disc,
        disc_store,
        gen_opt,
        disc_opt,
    })
}

/// Load only what inference needs: config and generator weights. The
/// discriminator and optimizer blocks are never materialized.
pub fn load_generator_only(path: &Path) -> Result<(PipelineConfig, u32, Generator, ParamStore)> {
    let blob = read_blob(path)?;
    let (cfg, epoch) = read_header(&blob)?;
    let mut gen_store = ParamStore::new();
    let gen = Generator::new(&mut gen_store, cfg.gen)?;
    decode_params_into(&mut gen_store, blob.require("PGEN")?)?;
    Ok((cfg, epoch, gen, gen_store))
}
