//! Synthetic paired corpus: generation, on-disk layout and batched loading.
//!
//! A corpus directory holds
//!
//! * `images.bin`: [`CorpusHeader`] then `count·C·H·W` little-endian `f32`,
//! * `reports.txt`: one report per line, aligned with the images,
//! * `vocab.txt`: one token per line, line number = id,
//! * `manifest.txt`: flat `key=value` description.

mod vocab;
mod world;

pub use vocab::{Vocabulary, CONTINUATION, RESERVED};
pub use world::{label_of, Glyph, Scene, SyntheticWorld};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::real::Real;
use crate::rng::{derive_seed, SeededRng};

pub const MAGIC: &[u8; 4] = b"MPMC";
pub const VERSION: u32 = 1;
/// Precision tag of 32-bit little-endian floats.
pub const PRECISION_F32: u32 = 4;
const HEADER_BYTES: usize = 4 + 6 * 4;

pub const IMAGES_FILE: &str = "images.bin";
pub const REPORTS_FILE: &str = "reports.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub version: u32,
    pub count: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub precision: u32,
}

impl CorpusHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for v in [self.version, self.count, self.channels, self.height, self.width, self.precision] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::format(path, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(path, format!("bad magic {:?}, expected \"MPMC\"", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let h = CorpusHeader {
            version: word(0),
            count: word(1),
            channels: word(2),
            height: word(3),
            width: word(4),
            precision: word(5),
        };
        if h.version != VERSION {
            return Err(Error::format(path, format!("unsupported version {}", h.version)));
        }
        if h.precision != PRECISION_F32 {
            return Err(Error::format(path, format!("unsupported precision tag {}", h.precision)));
        }
        if h.count == 0 || h.channels == 0 || h.height == 0 || h.width == 0 {
            return Err(Error::format(path, "empty extents in header"));
        }
        Ok(h)
    }

    pub fn image_len(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }
}

/// An in-memory corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    /// `count · C·H·W` pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub reports: Vec<String>,
    pub vocab: Vocabulary,
    pub manifest: KvMap,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Builds `n` pairs of `world` in memory.
pub fn build_corpus(n: usize, world: &SyntheticWorld) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("generate_corpus", "count must be at least 1"));
    }
    world.validate()?;
    let mut pixels = Vec::with_capacity(n * world.channels * world.height * world.width);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let (img, report, _) = world.sample(i);
        pixels.extend(img);
        reports.push(report);
    }
    let header = CorpusHeader {
        version: VERSION,
        count: n as u32,
        channels: world.channels as u32,
        height: world.height as u32,
        width: world.width as u32,
        precision: PRECISION_F32,
    };
    let mut manifest = KvMap::new();
    manifest.insert("seed", world.seed);
    manifest.insert("count", n);
    manifest.insert("channels", world.channels);
    manifest.insert("height", world.height);
    manifest.insert("width", world.width);
    manifest.insert("version", VERSION);
    manifest.insert("classes", Glyph::ALL.map(|g| g.word()).join(","));
    Ok(Corpus {
        header,
        pixels,
        reports,
        vocab: Vocabulary::synthetic(),
        manifest,
    })
}

/// Generates `n` pairs into `dir` (created if missing).
pub fn generate_corpus(dir: &Path, n: usize, world: &SyntheticWorld) -> Result<Corpus> {
    let corpus = build_corpus(n, world)?;
    corpus.save(dir)?;
    Ok(corpus)
}

/// Reads a corpus directory, checking the header against the data and the
/// report count.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let img_path = dir.join(IMAGES_FILE);
    let bytes = read(&img_path)?;
    let header = CorpusHeader::parse(&bytes, &img_path)?;
    let expected = HEADER_BYTES + header.count as usize * header.image_len() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &img_path,
            format!("{} bytes, header describes {expected}", bytes.len()),
        ));
    }
    let pixels: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let rep_path = dir.join(REPORTS_FILE);
    let reports: Vec<String> = read_text(&rep_path)?.lines().map(str::to_string).collect();
    if reports.len() != header.count as usize {
        return Err(Error::format(
            &rep_path,
            format!("{} reports for {} images", reports.len(), header.count),
        ));
    }
    let voc_path = dir.join(VOCAB_FILE);
    let vocab = Vocabulary::parse(&read_text(&voc_path)?).map_err(|e| Error::format(&voc_path, e.to_string()))?;
    let man_path = dir.join(MANIFEST_FILE);
    let manifest = KvMap::parse(&read_text(&man_path)?).map_err(|e| Error::format(&man_path, e.to_string()))?;
    Ok(Corpus {
        header,
        pixels,
        reports,
        vocab,
        manifest,
    })
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = self.header.to_bytes();
        bytes.reserve(self.pixels.len() * 4);
        for p in &self.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        write(&dir.join(IMAGES_FILE), &bytes)?;
        let reports: String = self.reports.iter().map(|r| format!("{r}\n")).collect();
        write(&dir.join(REPORTS_FILE), reports.as_bytes())?;
        write(&dir.join(VOCAB_FILE), self.vocab.render().as_bytes())?;
        write(&dir.join(MANIFEST_FILE), self.manifest.render().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.header.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let h = &self.header;
        (h.channels as usize, h.height as usize, h.width as usize)
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        label_of(&self.reports[i])
    }

    /// Item order for `epoch`: a seeded permutation, independent of any
    /// earlier epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        SeededRng::new(derive_seed(seed, &[0x5348_5546, epoch as u64])).permutation(self.len())
    }

    /// Index batches of `batch_size` over `order`; the last may be short.
    pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> PairedBatch<T> {
        PairedBatch {
            indices: indices.to_vec(),
            images: indices
                .iter()
                .map(|&i| self.image(i).iter().map(|&p| T::of(p as f64)).collect())
                .collect(),
            reports: indices.iter().map(|&i| self.reports[i].clone()).collect(),
        }
    }

    /// Batches of one epoch produced on a worker thread with at most
    /// `capacity` batches buffered ahead of the consumer.
    pub fn stream<T: Real>(self: &Arc<Self>, seed: u64, epoch: usize, batch_size: usize, capacity: usize) -> BatchStream<T> {
        let (tx, rx) = sync_channel(capacity.max(1));
        let corpus = Arc::clone(self);
        let worker = std::thread::spawn(move || {
            let order = corpus.epoch_order(seed, epoch);
            for idx in Corpus::batch_indices(&order, batch_size) {
                if tx.send(corpus.batch(&idx)).is_err() {
                    break;
                }
            }
        });
        BatchStream {
            rx: Some(rx),
            worker: Some(worker),
        }
    }
}

/// Images and reports of one batch, in batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch<T> {
    pub indices: Vec<usize>,
    /// `C·H·W` pixels per image.
    pub images: Vec<Vec<T>>,
    pub reports: Vec<String>,
}

impl<T> PairedBatch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub struct BatchStream<T> {
    rx: Option<Receiver<PairedBatch<T>>>,
    worker: Option<JoinHandle<()>>,
}

impl<T> Iterator for BatchStream<T> {
    type Item = PairedBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for BatchStream<T> {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Directory paths of a corpus's files.
pub fn corpus_files(dir: &Path) -> [PathBuf; 4] {
    [IMAGES_FILE, REPORTS_FILE, VOCAB_FILE, MANIFEST_FILE].map(|f| dir.join(f))
}
