use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Corpus, CorpusHeader, PRECISION_F32, VERSION};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::prepare_batch;
use crate::masking::{merge_patches, unpatchify, MaskPlan, MASK_ID};
use crate::model::{forward_sample, Model};
use crate::tensor::Tensor;

/// What `reconstruct` wrote for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDump {
    pub index: usize,
    pub masked_input: PathBuf,
    pub reconstruction: PathBuf,
    pub ground_truth: PathBuf,
    pub report: PathBuf,
    /// Mean squared error over the masked patches.
    pub masked_mse: f64,
    pub masked_report: String,
    pub filled_report: String,
}

/// Image file holding one `C×H×W` image in the corpus image format.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let header = CorpusHeader {
        version: VERSION,
        count: 1,
        channels: s[0] as u32,
        height: s[1] as u32,
        width: s[2] as u32,
        precision: PRECISION_F32,
    };
    let mut bytes = header.to_bytes();
    for p in image.data() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = CorpusHeader::parse(&bytes, path)?;
    let body = &bytes[28..];
    if h.count != 1 || body.len() != h.image_len() * 4 {
        return Err(Error::format(path, "expected exactly one image"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(vec![h.channels as usize, h.height as usize, h.width as usize], data)
}

/// 8-bit greyscale preview of the first channel.
fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data()[..h * w].iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn zero_masked(patches: &Tensor<f32>, plan: &MaskPlan) -> Tensor<f32> {
    let mut out = patches.clone();
    let w = patches.width();
    for &i in &plan.masked {
        out.data_mut()[i * w..(i + 1) * w].fill(0.0);
    }
    out
}

/// Masks the first `k` corpus pairs, runs both reconstruction branches and
/// dumps the input/reconstruction/ground-truth triptych plus the masked and
/// greedily filled reports. Only masked patches of the reconstruction come
/// from the model.
pub fn cmd_reconstruct(model: &Model<f32>, cfg: &RunConfig, corpus: &Corpus, k: usize, out: &Path) -> Result<Vec<ReconstructionDump>> {
    if k == 0 || k > corpus.len() {
        return Err(Error::Config(format!("k={k} but the corpus has {} pairs", corpus.len())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let m = &model.cfg;
    let indices: Vec<usize> = (0..k).collect();
    let batch = corpus.batch::<f32>(&indices);
    let inputs = prepare_batch(&batch, cfg, &corpus.vocab, 0)?;
    let mut dumps = Vec::with_capacity(k);
    for (i, x) in inputs.iter().enumerate() {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let o = forward_sample(&tape, &p, m, x)?;
        let recon = tape.value(o.recon_patches).clone();
        let truth = tape.value(o.target_patches).clone();
        let masked_mse = recon
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / recon.numel() as f64;

        let plan = &x.image_plan;
        let visible = Tensor::new(
            vec![plan.visible.len(), m.patch_dim()],
            plan.visible.iter().flat_map(|&r| x.patches.row(r).to_vec()).collect(),
        )?;
        let composite = merge_patches(&visible, &recon, plan)?;
        let to_image = |t: &Tensor<f32>| unpatchify(t, m.channels, m.height, m.width, m.patch);
        let images = [
            ("masked", to_image(&zero_masked(&x.patches, plan))?),
            ("recon", to_image(&composite)?),
            ("truth", to_image(&x.patches)?),
        ];
        let mut paths = Vec::new();
        for (tag, img) in &images {
            let path = out.join(format!("sample_{i:04}_{tag}.bin"));
            write_image(&path, img)?;
            write_pgm(&path.with_extension("pgm"), img)?;
            paths.push(path);
        }

        let logits = tape.value(o.mlm_logits).clone();
        let mut filled = x.report_mask.input_ids.clone();
        for (r, &pos) in x.report_mask.positions.iter().enumerate() {
            let row = logits.row(r);
            filled[pos] = (0..row.len())
                .filter(|&id| id != MASK_ID)
                .fold(0, |a, b| if row[b] > row[a] { b } else { a });
        }
        let masked_report = corpus.vocab.detokenize(&x.report_mask.input_ids);
        let filled_report = corpus.vocab.detokenize(&filled);
        let report = out.join(format!("sample_{i:04}_report.txt"));
        let text = format!(
            "masked: {masked_report}\nfilled: {filled_report}\ntruth: {}\n",
            corpus.reports[batch.indices[i]]
        );
        fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
        dumps.push(ReconstructionDump {
            index: batch.indices[i],
            masked_input: paths[0].clone(),
            reconstruction: paths[1].clone(),
            ground_truth: paths[2].clone(),
            report,
            masked_mse,
            masked_report,
            filled_report,
        });
    }
    Ok(dumps)
}
