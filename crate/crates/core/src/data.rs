//! Portable multimodal dataset format plus a synthetic generator.
//!
//! On-disk layout: `root/manifest.txt`, `root/<split>/<modality>/<id>.tns`,
//! `root/<split>/labels/<id>.lbl`. Rasters are `TNSR` files (little-endian
//! f32 payload), labels are `LBLS` files (u8 payload, 255 = ignore), and
//! the manifest is flat key-value text.
//!
//! The generator produces three kinds of scenes. `single_modality_sufficient`
//! puts everything a model needs into modality 0. `xor_fusion` gives every
//! image a hidden sign per modality and colors the foreground class by the
//! sign product, so no single modality carries any information about the
//! foreground class. `per_class_modality` makes each foreground class
//! visible in exactly one designated modality.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"TNSR";
pub const RASTER_VERSION: u32 = 1;
pub const LABEL_MAGIC: &[u8; 4] = b"LBLS";
/// Unlabeled band around every synthetic label raster, in pixels.
pub const BORDER_IGNORE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub modalities: Vec<String>,
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub splits: Vec<(String, Vec<String>)>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ids)| ids.as_slice())
            .ok_or_else(|| Error::Data(format!("split '{name}' not in manifest")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("modalities = {}\n", self.modalities.join(",")));
        out.push_str(&format!("classes = {}\n", self.classes.join(",")));
        out.push_str(&format!("height = {}\n", self.height));
        out.push_str(&format!("width = {}\n", self.width));
        for (name, ids) in &self.splits {
            out.push_str(&format!("split.{name} = {}\n", ids.join(",")));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut modalities = None;
        let mut classes = None;
        let mut height = None;
        let mut width = None;
        let mut splits = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("manifest line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            match key {
                "modalities" => modalities = Some(list()),
                "classes" => classes = Some(list()),
                "height" => height = Some(parse_usize(key, value)?),
                "width" => width = Some(parse_usize(key, value)?),
                _ => {
                    if let Some(split) = key.strip_prefix("split.") {
                        splits.push((split.to_string(), list()));
                    } else {
                        return Err(Error::Format(format!("manifest: unknown key '{key}'")));
                    }
                }
            }
        }
        let need = |name: &str| Error::Format(format!("manifest: missing '{name}'"));
        Ok(DatasetManifest {
            modalities: modalities.ok_or_else(|| need("modalities"))?,
            classes: classes.ok_or_else(|| need("classes"))?,
            height: height.ok_or_else(|| need("height"))?,
            width: width.ok_or_else(|| need("width"))?,
            splits,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("manifest.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("manifest: '{key}' is not an integer: '{value}'")))
}

// ---- raster and label files ----

pub fn write_raster(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    buf.extend_from_slice(RASTER_MAGIC);
    buf.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Tensor<f32>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4)?;
    if magic != RASTER_MAGIC {
        return Err(cur.format_err(format!("bad magic {magic:?}, expected TNSR")));
    }
    let version = cur.u32()?;
    if version != RASTER_VERSION {
        return Err(cur.format_err(format!("unsupported raster version {version}")));
    }
    let ndim = cur.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(cur.format_err(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = cur.take(n * 4)?;
    if cur.remaining() != 0 {
        return Err(cur.format_err(format!("{} trailing bytes", cur.remaining())));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + labels.data().len());
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&(labels.height as u32).to_le_bytes());
    buf.extend_from_slice(&(labels.width as u32).to_le_bytes());
    buf.extend_from_slice(labels.data());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4)?;
    if magic != LABEL_MAGIC {
        return Err(cur.format_err(format!("bad magic {magic:?}, expected LBLS")));
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let payload = cur.take(h * w)?;
    if cur.remaining() != 0 {
        return Err(cur.format_err(format!("{} trailing bytes", cur.remaining())));
    }
    LabelMap::new(h, w, payload.to_vec())
}

/// Byte reader that converts truncation into format errors naming the file.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.format_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn format_err(&self, msg: String) -> Error {
        Error::Format(format!("{}: {msg}", self.path.display()))
    }
}

// ---- dataset access ----

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

/// One training/eval item: the requested modality rasters plus labels.
pub type Sample = (Vec<Tensor<f32>>, LabelMap);

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = DatasetManifest::load(&root)?;
        Ok(Self { manifest, root })
    }

    /// Loads the listed modalities (in request order) and the labels for
    /// one sample id.
    pub fn load_sample(&self, split: &str, id: &str, modalities: &[String]) -> Result<Sample> {
        for m in modalities {
            if !self.manifest.modalities.contains(m) {
                return Err(Error::Config(format!(
                    "modality '{m}' not in manifest ({})",
                    self.manifest.modalities.join(",")
                )));
            }
        }
        let mut images = Vec::with_capacity(modalities.len());
        for m in modalities {
            let path = self.root.join(split).join(m).join(format!("{id}.tns"));
            let t = read_raster(&path)?;
            if t.shape().len() != 3 || t.shape()[0] != 3 {
                return Err(Error::Format(format!(
                    "{}: expected [3,H,W] raster, got {:?}",
                    path.display(),
                    t.shape()
                )));
            }
            images.push(t);
        }
        let path = self.root.join(split).join("labels").join(format!("{id}.lbl"));
        let labels = read_labels(&path)?;
        Ok((images, labels))
    }

    pub fn load_split(&self, split: &str, modalities: &[String]) -> Result<Vec<Sample>> {
        self.manifest
            .split(split)?
            .iter()
            .map(|id| self.load_sample(split, id, modalities))
            .collect()
    }
}

// ---- synthetic generation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    SingleModalitySufficient,
    XorFusion,
    PerClassModality,
}

impl SynthMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthMode::SingleModalitySufficient => "single_modality_sufficient",
            SynthMode::XorFusion => "xor_fusion",
            SynthMode::PerClassModality => "per_class_modality",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "single_modality_sufficient" => SynthMode::SingleModalitySufficient,
            "xor_fusion" => SynthMode::XorFusion,
            "per_class_modality" => SynthMode::PerClassModality,
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic mode '{other}'"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub modalities: usize,
    pub classes: usize,
    pub extent: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub mode: SynthMode,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 8 * BORDER_IGNORE {
            return Err(Error::Config(format!(
                "extent {} too small for a {}px ignore border",
                self.extent, BORDER_IGNORE
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.modalities == 0 {
            return Err(Error::Config("need at least one modality".into()));
        }
        match self.mode {
            SynthMode::XorFusion => {
                if self.modalities < 2 {
                    return Err(Error::Config(
                        "xor_fusion splits its signal over two modalities; need M >= 2".into(),
                    ));
                }
                if self.classes != 3 {
                    return Err(Error::Config(format!(
                        "xor_fusion uses exactly 3 classes (background + 2 foreground), got {}",
                        self.classes
                    )));
                }
            }
            SynthMode::PerClassModality => {
                if self.modalities < 2 {
                    return Err(Error::Config(
                        "per_class_modality needs M >= 2 to vary the designated modality".into(),
                    ));
                }
                if self.classes < 3 {
                    return Err(Error::Config(
                        "per_class_modality needs at least 2 foreground classes".into(),
                    ));
                }
            }
            SynthMode::SingleModalitySufficient => {
                if self.classes < 2 {
                    return Err(Error::Config("need at least 2 classes".into()));
                }
            }
        }
        if self.classes > 200 {
            return Err(Error::Config(format!(
                "class count {} collides with the ignore index",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.mode {
            SynthMode::XorFusion => {
                vec!["background".into(), "xor_pos".into(), "xor_neg".into()]
            }
            SynthMode::PerClassModality => {
                let mut names = vec!["background".to_string()];
                for c in 1..self.classes {
                    names.push(format!("class{}_m{}", c, (c - 1) % self.modalities));
                }
                names
            }
            SynthMode::SingleModalitySufficient => {
                let mut names = vec!["background".to_string()];
                for c in 1..self.classes {
                    names.push(format!("class{c}"));
                }
                names
            }
        }
    }
}

/// One generated scene, before being written to disk.
struct Scene {
    images: Vec<Tensor<f32>>,
    labels: LabelMap,
}

/// Writes a deterministic synthetic dataset under `root` and returns its
/// manifest. The same spec (seed included) regenerates byte-identical
/// files.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let modalities: Vec<String> = (0..spec.modalities).map(|m| format!("m{m}")).collect();
    let splits = [("train", spec.n_train), ("val", spec.n_val)];
    let mut manifest_splits = Vec::new();
    let mut scene_index = 0usize;
    for (split, count) in splits {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("s{i:04}");
            let scene = generate_scene(spec, &mut rng, scene_index);
            scene_index += 1;
            for (m, image) in scene.images.iter().enumerate() {
                let path = root
                    .join(split)
                    .join(&modalities[m])
                    .join(format!("{id}.tns"));
                write_raster(&path, image)?;
            }
            let path = root.join(split).join("labels").join(format!("{id}.lbl"));
            write_labels(&path, &scene.labels)?;
            ids.push(id);
        }
        manifest_splits.push((split.to_string(), ids));
    }
    let manifest = DatasetManifest {
        modalities,
        classes: spec.class_names(),
        height: spec.extent,
        width: spec.extent,
        splits: manifest_splits,
    };
    manifest.save(root)?;
    Ok(manifest)
}

fn generate_scene(spec: &SynthSpec, rng: &mut ChaCha8Rng, index: usize) -> Scene {
    let e = spec.extent;
    let mut labels = LabelMap::filled(e, e, 0);
    // signal[modality][pixel], replicated over the 3 raster channels
    let mut signal = vec![vec![0.0f64; e * e]; spec.modalities];
    match spec.mode {
        SynthMode::SingleModalitySufficient => {
            for class in 1..spec.classes {
                let (y0, y1, x0, x1) = random_rect(rng, e);
                let level = class_level(class, spec.classes);
                for y in y0..y1 {
                    for x in x0..x1 {
                        labels.set(y, x, class as u8);
                        signal[0][y * e + x] = level;
                    }
                }
            }
        }
        SynthMode::XorFusion => {
            // hidden per-image signs, stratified so every (a, b) cell
            // appears equally often
            let cell = index % 4;
            let a = if cell & 1 == 0 { 1.0 } else { -1.0 };
            let b = if cell & 2 == 0 { 1.0 } else { -1.0 };
            let margin = e / 5;
            let class = if a * b > 0.0 { 1u8 } else { 2u8 };
            for y in margin..e - margin {
                for x in margin..e - margin {
                    labels.set(y, x, class);
                    signal[0][y * e + x] = a;
                    signal[1][y * e + x] = b;
                }
            }
        }
        SynthMode::PerClassModality => {
            for class in 1..spec.classes {
                let modality = (class - 1) % spec.modalities;
                let (y0, y1, x0, x1) = random_rect(rng, e);
                for y in y0..y1 {
                    for x in x0..x1 {
                        labels.set(y, x, class as u8);
                        for (m, plane) in signal.iter_mut().enumerate() {
                            // visible only in the designated modality
                            plane[y * e + x] = if m == modality { 1.2 } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
    labels.ignore_border(BORDER_IGNORE);
    let images = signal
        .iter()
        .map(|plane| {
            let mut data = Vec::with_capacity(3 * e * e);
            for _channel in 0..3 {
                for &v in plane {
                    data.push((v + spec.noise_sigma * normal(rng)) as f32);
                }
            }
            Tensor::new(vec![3, e, e], data).expect("scene raster shape")
        })
        .collect();
    Scene { images, labels }
}

/// Distinct, well-separated intensity for a foreground class.
fn class_level(class: usize, classes: usize) -> f64 {
    let fg = (classes - 1).max(1) as f64;
    0.5 + (class as f64 - 1.0) / fg
}

fn random_rect(rng: &mut ChaCha8Rng, e: usize) -> (usize, usize, usize, usize) {
    let min = (e / 5).max(3);
    let max = (2 * e / 5).max(min + 1);
    let h = rng.gen_range(min..max);
    let w = rng.gen_range(min..max);
    let y0 = rng.gen_range(0..e - h);
    let x0 = rng.gen_range(0..e - w);
    (y0, y0 + h, x0, x0 + w)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Expected directory mapping for converting real multimodal segmentation
/// datasets into this format. Not wired to any downloader; it documents
/// the contract a converter must satisfy.
pub fn converter_notes() -> &'static str {
    "Convert an external dataset by writing, per split and sample id:\n\
     <root>/<split>/<modality>/<id>.tns  [3,H,W] f32 raster (replicate\n\
     single-channel modalities across the 3 channels)\n\
     <root>/<split>/labels/<id>.lbl      u8 class indices, 255 = unlabeled\n\
     plus <root>/manifest.txt listing modalities, class names, extents and\n\
     split id lists. Extents must be uniform and divisible by 32."
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::IGNORE_INDEX;
    use tempfile::tempdir;

    fn xor_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            modalities: 2,
            classes: 3,
            extent: 32,
            n_train: 8,
            n_val: 4,
            mode: SynthMode::XorFusion,
            noise_sigma: 0.05,
            seed,
        }
    }

    #[test]
    fn raster_roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = Tensor::new(vec![3, 8, 8], data).unwrap();
        write_raster(&path, &t).unwrap();
        let back = read_raster(&path).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn truncated_raster_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let t = Tensor::<f32>::zeros(&[2, 3]);
        write_raster(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_raster(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error_with_path() {
        let err = read_raster(Path::new("/nonexistent/q.tns")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("q.tns"));
    }

    #[test]
    fn label_roundtrip_and_magic_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.lbl");
        let mut labels = LabelMap::filled(6, 6, 1);
        labels.ignore_border(2);
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);

        fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(read_labels(&path), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_roundtrip() {
        let m = DatasetManifest {
            modalities: vec!["m0".into(), "m1".into()],
            classes: vec!["background".into(), "a".into()],
            height: 32,
            width: 32,
            splits: vec![
                ("train".into(), vec!["s0000".into(), "s0001".into()]),
                ("val".into(), vec!["s0000".into()]),
            ],
        };
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn same_seed_regenerates_byte_identical_datasets() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        generate_synthetic(&xor_spec(9), dir_a.path()).unwrap();
        generate_synthetic(&xor_spec(9), dir_b.path()).unwrap();
        for entry in walk(dir_a.path()) {
            let rel = entry.strip_prefix(dir_a.path()).unwrap();
            let twin = dir_b.path().join(rel);
            assert_eq!(
                fs::read(&entry).unwrap(),
                fs::read(&twin).unwrap(),
                "mismatch at {rel:?}"
            );
        }
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for path in entries {
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out
    }

    #[test]
    fn structural_contract_ids_times_modalities_plus_labels() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            modalities: 3,
            classes: 4,
            extent: 32,
            n_train: 8,
            n_val: 2,
            mode: SynthMode::PerClassModality,
            noise_sigma: 0.0,
            seed: 3,
        };
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest.split("train").unwrap().len(), 8);
        assert_eq!(manifest.modalities.len(), 3);
        let ds = Dataset::open(dir.path()).unwrap();
        // subset request comes back in request order
        let subset = vec!["m2".to_string(), "m0".to_string()];
        let (images, labels) = ds.load_sample("train", "s0003", &subset).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(labels.height, 32);
        // full split loads
        assert_eq!(ds.load_split("val", &manifest.modalities).unwrap().len(), 2);
        // unknown modality is a config error
        assert!(matches!(
            ds.load_sample("train", "s0000", &["zz".to_string()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_use_255_only_in_the_border_band() {
        let dir = tempdir().unwrap();
        generate_synthetic(&xor_spec(1), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let (_, labels) = ds
            .load_sample("train", "s0000", &["m0".to_string()])
            .unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let in_border = y < 2 || x < 2 || y >= 30 || x >= 30;
                let v = labels.get(y, x);
                assert_eq!(v == IGNORE_INDEX, in_border, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn xor_single_modality_probe_is_at_chance() {
        // the foreground class must be undecidable from modality 0 alone:
        // a 1-D threshold probe on per-image foreground means should not
        // beat chance by more than a small margin
        let dir = tempdir().unwrap();
        let mut spec = xor_spec(7);
        spec.n_train = 32;
        spec.noise_sigma = 0.0;
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let samples = ds.load_split("train", &["m0".to_string()]).unwrap();
        let mut feats = Vec::new();
        let mut labs = Vec::new();
        for (images, labels) in &samples {
            let e = labels.width;
            let mut sum = 0.0f64;
            let mut n = 0usize;
            let mut class = 0u8;
            for y in 0..e {
                for x in 0..e {
                    let l = labels.get(y, x);
                    if l == 1 || l == 2 {
                        sum += images[0].data()[y * e + x] as f64;
                        n += 1;
                        class = l;
                    }
                }
            }
            feats.push(sum / n as f64);
            labs.push(class);
        }
        // best threshold classifier in either direction
        let mut best = 0.0f64;
        for &t in &feats {
            for dir in [1.0f64, -1.0] {
                let acc = feats
                    .iter()
                    .zip(&labs)
                    .filter(|(f, l)| (dir * (**f - t) >= 0.0) == (**l == 1))
                    .count() as f64
                    / feats.len() as f64;
                best = best.max(acc);
            }
        }
        assert!(best <= 0.56, "probe accuracy {best}");

        // jointly, the sign product decides the class exactly at zero noise
        let both = ds
            .load_split("train", &["m0".to_string(), "m1".to_string()])
            .unwrap();
        for (images, labels) in &both {
            let e = labels.width;
            for y in 0..e {
                for x in 0..e {
                    let l = labels.get(y, x);
                    if l == 1 || l == 2 {
                        let a = images[0].data()[y * e + x] as f64;
                        let b = images[1].data()[y * e + x] as f64;
                        let want = if a * b > 0.0 { 1 } else { 2 };
                        assert_eq!(l, want);
                    }
                }
            }
        }
    }
}
