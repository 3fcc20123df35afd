use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::variant::ExperimentVariant;
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::clplugin::{HardMask, InsertionMode, MaskStore, PluginState, Site};
use crate::error::{Error, Result};
use crate::model::{BackboneLM, Classifier, PluggedModel, PluginLayout};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// A p-LM snapshot taken after a domain finished post-training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: ExperimentVariant,
    pub config_digest: String,
    /// Full planned domain order.
    pub order: Vec<String>,
    /// Number of domains of `order` already post-trained.
    pub completed: usize,
    pub reset_markers: Vec<usize>,
    /// Non-reserved vocabulary words in id order.
    pub vocab: Vec<String>,
    pub model: PluggedModel,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    bank: usize,
    layer: usize,
    site: Site,
    task: usize,
    mask_layer: usize,
    len: usize,
    theta: f64,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct PluginRecord {
    name: String,
    site: Site,
    mode: InsertionMode,
    d_model: usize,
    d_hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    embeddings: Vec<[ParamId; 2]>,
    tau_min: f64,
}

#[derive(Serialize, Deserialize)]
struct LayoutRecord {
    mode: InsertionMode,
    banks: Vec<Vec<[PluginRecord; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    variant: ExperimentVariant,
    config_digest: String,
    order: Vec<String>,
    completed: usize,
    reset_markers: Vec<usize>,
    vocab: Vec<String>,
    backbone: BackboneLM,
    plugins: Option<LayoutRecord>,
    mlm_heads: Vec<ParamId>,
    classifiers: BTreeMap<usize, Classifier>,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
}

fn record(p: &PluginState) -> PluginRecord {
    PluginRecord {
        name: p.name.clone(),
        site: p.site,
        mode: p.mode,
        d_model: p.d_model,
        d_hidden: p.d_hidden,
        w1: p.w1,
        b1: p.b1,
        w2: p.w2,
        b2: p.b2,
        embeddings: p.embeddings.clone(),
        tau_min: p.masks.tau_min(),
    }
}

fn pack_bits(values: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; values.len().div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn site_index(site: Site) -> usize {
    match site {
        Site::Attention => 0,
        Site::Ffn => 1,
    }
}

impl Checkpoint {
    /// Manifest text and binary blob.
    pub fn to_bytes(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.model.store.len());
        for (_, p) in self.model.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
            });
            for v in p.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut masks = Vec::new();
        let plugins = self.model.plugins.as_ref().map(|layout| {
            for (b, bank) in layout.banks.iter().enumerate() {
                for (l, pair) in bank.iter().enumerate() {
                    for p in pair {
                        for (&(task, mask_layer), m) in p.masks.iter() {
                            masks.push(MaskEntry {
                                bank: b,
                                layer: l,
                                site: p.site,
                                task,
                                mask_layer,
                                len: m.len(),
                                theta: m.theta,
                                offset: blob.len() as u64,
                            });
                            blob.extend(pack_bits(&m.values));
                        }
                    }
                }
            }
            LayoutRecord {
                mode: layout.mode,
                banks: layout
                    .banks
                    .iter()
                    .map(|bank| bank.iter().map(|[a, f]| [record(a), record(f)]).collect())
                    .collect(),
            }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            variant: self.variant,
            config_digest: self.config_digest.clone(),
            order: self.order.clone(),
            completed: self.completed,
            reset_markers: self.reset_markers.clone(),
            vocab: self.vocab.clone(),
            backbone: self.model.backbone.clone(),
            plugins,
            mlm_heads: self.model.mlm_heads.clone(),
            classifiers: self.model.classifiers.clone(),
            tensors,
            masks,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        Ok((text, blob))
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", m.format_version)));
        }
        let mut store = ParamStore::new();
        let mut cursor = 0u64;
        for t in &m.tensors {
            if t.dtype != "f64" {
                return Err(Error::Format(format!("tensor {} has dtype {}", t.name, t.dtype)));
            }
            if t.offset != cursor {
                return Err(Error::Format(format!("tensor {} starts at {} not {cursor}", t.name, t.offset)));
            }
            let n: usize = t.shape.iter().product();
            let end = cursor as usize + 8 * n;
            let bytes = blob
                .get(cursor as usize..end)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the blob", t.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
            cursor = end as u64;
        }
        let check = |id: ParamId| -> Result<ParamId> {
            if id.0 < store.len() {
                Ok(id)
            } else {
                Err(Error::Integrity(format!("parameter id {} outside the {} stored tensors", id.0, store.len())))
            }
        };
        for id in m.backbone.params().into_iter().chain(m.mlm_heads.iter().copied()) {
            check(id)?;
        }
        for c in m.classifiers.values() {
            check(c.weight)?;
            check(c.bias)?;
        }
        let plugins = match m.plugins {
            None => None,
            Some(layout) => {
                let mut banks = Vec::with_capacity(layout.banks.len());
                for bank in layout.banks {
                    let mut layers = Vec::with_capacity(bank.len());
                    for pair in bank {
                        let [a, f] = pair.map(|r| {
                            for id in [r.w1, r.b1, r.w2, r.b2].into_iter().chain(r.embeddings.iter().flatten().copied()) {
                                check(id)?;
                            }
                            Ok::<_, Error>(PluginState {
                                masks: MaskStore::new([r.d_hidden, r.d_model], r.tau_min),
                                name: r.name,
                                site: r.site,
                                mode: r.mode,
                                d_model: r.d_model,
                                d_hidden: r.d_hidden,
                                w1: r.w1,
                                b1: r.b1,
                                w2: r.w2,
                                b2: r.b2,
                                embeddings: r.embeddings,
                            })
                        });
                        layers.push([a?, f?]);
                    }
                    banks.push(layers);
                }
                let mut layout = PluginLayout { mode: layout.mode, banks };
                for e in &m.masks {
                    let end = e.offset as usize + e.len.div_ceil(8);
                    if e.offset != cursor {
                        return Err(Error::Format(format!("mask record at {} not {cursor}", e.offset)));
                    }
                    let bytes = blob
                        .get(e.offset as usize..end)
                        .ok_or_else(|| Error::Format("mask bits run past the blob".into()))?;
                    let plugin = layout
                        .banks
                        .get_mut(e.bank)
                        .and_then(|b| b.get_mut(e.layer))
                        .map(|pair| &mut pair[site_index(e.site)])
                        .ok_or_else(|| Error::Integrity(format!("mask for missing plugin {}/{}", e.bank, e.layer)))?;
                    plugin.masks.insert(e.task, e.mask_layer, HardMask::from_bits(&unpack_bits(bytes, e.len), e.theta))?;
                    cursor = end as u64;
                }
                Some(layout)
            }
        };
        if cursor as usize != blob.len() {
            return Err(Error::Format(format!("blob has {} trailing bytes", blob.len() - cursor as usize)));
        }
        Ok(Checkpoint {
            variant: m.variant,
            config_digest: m.config_digest,
            order: m.order,
            completed: m.completed,
            reset_markers: m.reset_markers,
            vocab: m.vocab,
            model: PluggedModel {
                store,
                backbone: m.backbone,
                plugins,
                mlm_heads: m.mlm_heads,
                classifiers: m.classifiers,
            },
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (manifest, blob) = self.to_bytes()?;
        std::fs::write(dir.join(BLOB_FILE), blob)?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = std::fs::read(dir.join(BLOB_FILE))?;
        Self::from_bytes(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_packing_round_trips() {
        let v = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let packed = pack_bits(&v);
        assert_eq!(packed, vec![0b0101_1001, 0b0000_0011]);
        let back: Vec<f64> = unpack_bits(&packed, v.len()).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(back, v);
    }
}
