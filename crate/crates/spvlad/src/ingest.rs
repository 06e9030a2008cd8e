//! Binary file formats and persistence.
//!
//! Three container kinds, all little-endian and platform-independent:
//!
//! * `SPVD` datasets: per-image region boxes and `f32` descriptors, read as
//!   a stream so only one image is in memory at a time.
//! * `SPVM` models: PCA or codebook coefficients at `f64`, so a round-trip
//!   reproduces every coefficient exactly.
//! * `SPVE` encodings: finished `f32` representation vectors.
//!
//! Every writer also drops a human-readable JSON sidecar next to the binary
//! file (same filename plus `.json`) mirroring the header fields; the binary
//! file is authoritative. Readers never require the sidecar, with one
//! exception: a codebook's training inertia has no slot in the binary
//! container and travels in the sidecar, so it loads as `None` when the
//! sidecar is gone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::codebook::Codebook;
use crate::datamodel::{
    EncodedRepresentation, ImageRecord, PyramidSpec, RegionDescriptor, validate_image,
};
use crate::error::{Error, Result};
use crate::pca::PcaModel;

pub const DATASET_MAGIC: [u8; 4] = *b"SPVD";
pub const MODEL_MAGIC: [u8; 4] = *b"SPVM";
pub const ENCODING_MAGIC: [u8; 4] = *b"SPVE";
pub const DATASET_VERSION: u32 = 1;

const MODEL_KIND_PCA: u8 = 1;
const MODEL_KIND_CODEBOOK: u8 = 2;

/// Longest image id accepted on read; a corrupt length field fails cleanly
/// instead of attempting a huge allocation.
const MAX_ID_LEN: u32 = 1 << 20;

/// Path of the JSON sidecar belonging to a binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

fn write_sidecar(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut out = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn check_magic<R: Read>(r: &mut R, expected: [u8; 4], name: &'static str) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(map_eof)?;
    if found != expected {
        return Err(Error::BadMagic { expected: name, found });
    }
    Ok(())
}

fn map_eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated
    } else {
        Error::Io(e)
    }
}

/// Parsed `SPVD` header: descriptor dimension and declared image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub dim: u32,
    pub count: u64,
}

/// Streaming dataset reader; yields one [`ImageRecord`] at a time.
pub struct DatasetReader<R: Read> {
    reader: R,
    header: DatasetHeader,
    next_index: u64,
    failed: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        check_magic(&mut reader, DATASET_MAGIC, "dataset")?;
        let version = reader.read_u32::<LittleEndian>().map_err(map_eof)?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = reader.read_u32::<LittleEndian>().map_err(map_eof)?;
        if dim == 0 {
            return Err(Error::InvalidInput("dataset declares dimension 0".into()));
        }
        let count = reader.read_u64::<LittleEndian>().map_err(map_eof)?;
        Ok(Self { reader, header: DatasetHeader { dim, count }, next_index: 0, failed: false })
    }

    pub fn header(&self) -> DatasetHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    /// Declared number of images (named to stay clear of `Iterator::count`).
    pub fn image_count(&self) -> u64 {
        self.header.count
    }

    fn read_record(&mut self) -> Result<ImageRecord> {
        let image = self.next_index;
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::TruncatedDataset { image }
            } else {
                Error::Io(e)
            }
        };
        let id_len = self.reader.read_u32::<LittleEndian>().map_err(eof)?;
        if id_len > MAX_ID_LEN {
            return Err(Error::InvalidInput(format!(
                "image {image} declares an id of {id_len} bytes"
            )));
        }
        let mut id_bytes = vec![0u8; id_len as usize];
        self.reader.read_exact(&mut id_bytes).map_err(eof)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::InvalidInput(format!("image {image} id is not valid UTF-8")))?;
        let width = self.reader.read_u32::<LittleEndian>().map_err(eof)?;
        let height = self.reader.read_u32::<LittleEndian>().map_err(eof)?;
        let n = self.reader.read_u32::<LittleEndian>().map_err(eof)? as usize;

        let mut boxes = vec![0.0f32; n * 4];
        self.reader.read_f32_into::<LittleEndian>(&mut boxes).map_err(eof)?;
        let dim = self.header.dim as usize;
        let mut regions = Vec::with_capacity(n);
        for b in boxes.chunks_exact(4) {
            let mut features = vec![0.0f32; dim];
            self.reader.read_f32_into::<LittleEndian>(&mut features).map_err(eof)?;
            regions.push(RegionDescriptor::new(b[0], b[1], b[2], b[3], features));
        }
        Ok(ImageRecord::new(id, width, height, regions))
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_index >= self.header.count {
            return None;
        }
        let result = self.read_record();
        match result {
            Ok(record) => {
                self.next_index += 1;
                Some(Ok(record))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Streaming dataset writer; the image count is declared up front.
pub struct DatasetWriter<W: Write> {
    writer: W,
    dim: u32,
    declared: u64,
    written: u64,
    sidecar: Option<PathBuf>,
}

impl DatasetWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, dim: usize, count: u64) -> Result<Self> {
        let path = path.as_ref();
        let mut writer = Self::new(BufWriter::new(File::create(path)?), dim, count)?;
        writer.sidecar = Some(path.to_path_buf());
        Ok(writer)
    }
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut writer: W, dim: usize, count: u64) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("unrepresentable dimension {dim}")));
        }
        writer.write_all(&DATASET_MAGIC)?;
        writer.write_u32::<LittleEndian>(DATASET_VERSION)?;
        writer.write_u32::<LittleEndian>(dim as u32)?;
        writer.write_u64::<LittleEndian>(count)?;
        Ok(Self { writer, dim: dim as u32, declared: count, written: 0, sidecar: None })
    }

    /// Validates and appends one record. The record index in any violation
    /// report is its position in the file.
    pub fn write_record(&mut self, record: &ImageRecord) -> Result<()> {
        if self.written == self.declared {
            return Err(Error::InvalidInput(format!(
                "dataset declared {} images; cannot append more",
                self.declared
            )));
        }
        let violations = validate_image(record, self.dim as usize);
        if !violations.is_empty() {
            let index = self.written as usize;
            return Err(Error::InvalidRecords(
                violations.into_iter().map(|v| (index, v)).collect(),
            ));
        }
        let w = &mut self.writer;
        w.write_u32::<LittleEndian>(record.id.len() as u32)?;
        w.write_all(record.id.as_bytes())?;
        w.write_u32::<LittleEndian>(record.width)?;
        w.write_u32::<LittleEndian>(record.height)?;
        w.write_u32::<LittleEndian>(record.regions.len() as u32)?;
        for r in &record.regions {
            w.write_f32::<LittleEndian>(r.x)?;
            w.write_f32::<LittleEndian>(r.y)?;
            w.write_f32::<LittleEndian>(r.w)?;
            w.write_f32::<LittleEndian>(r.h)?;
        }
        for r in &record.regions {
            for v in &r.features {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        self.written += 1;
        Ok(())
    }

    /// Flushes and writes the sidecar; errors if fewer records arrived than
    /// the header declared.
    pub fn finish(mut self) -> Result<()> {
        if self.written != self.declared {
            return Err(Error::InvalidInput(format!(
                "dataset declared {} images but {} were written",
                self.declared, self.written
            )));
        }
        self.writer.flush()?;
        if let Some(path) = &self.sidecar {
            write_sidecar(
                path,
                &serde_json::json!({
                    "format": "spvd",
                    "version": DATASET_VERSION,
                    "dim": self.dim,
                    "count": self.declared,
                }),
            )?;
        }
        Ok(())
    }
}

/// Validates all records, then writes the whole dataset.
///
/// Validation runs first over everything so the error lists every violation
/// in every record, not just the first.
pub fn write_dataset(path: impl AsRef<Path>, dim: usize, records: &[ImageRecord]) -> Result<()> {
    let mut violations = Vec::new();
    for (i, record) in records.iter().enumerate() {
        violations.extend(validate_image(record, dim).into_iter().map(|v| (i, v)));
    }
    if !violations.is_empty() {
        return Err(Error::InvalidRecords(violations));
    }
    let mut writer = DatasetWriter::create(path, dim, records.len() as u64)?;
    for record in records {
        writer.write_record(record)?;
    }
    writer.finish()
}

/// Reads a whole dataset into memory. Prefer [`DatasetReader`] when the
/// dataset may be large.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    DatasetReader::open(path)?.collect()
}

/// A deserialized `SPVM` file of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Pca(PcaModel),
    Codebook(Codebook),
}

fn write_model(
    path: &Path,
    kind: u8,
    rows: usize,
    cols: usize,
    payload: &[f64],
    sidecar: serde_json::Value,
) -> Result<()> {
    if rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err(Error::InvalidInput("model shape exceeds u32".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_u8(kind)?;
    w.write_u32::<LittleEndian>(rows as u32)?;
    w.write_u32::<LittleEndian>(cols as u32)?;
    for v in payload {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.flush()?;
    write_sidecar(path, &sidecar)
}

/// Saves a PCA model: basis rows first, then the mean as one extra row.
pub fn save_pca_model(path: impl AsRef<Path>, model: &PcaModel) -> Result<()> {
    let mut payload = Vec::with_capacity((model.output_dim() + 1) * model.input_dim());
    payload.extend_from_slice(model.basis());
    payload.extend_from_slice(model.mean());
    write_model(
        path.as_ref(),
        MODEL_KIND_PCA,
        model.output_dim(),
        model.input_dim(),
        &payload,
        serde_json::json!({
            "format": "spvm",
            "kind": "pca",
            "input_dim": model.input_dim(),
            "output_dim": model.output_dim(),
        }),
    )
}

/// Saves a codebook; the training inertia (if any) goes into the sidecar.
pub fn save_codebook(path: impl AsRef<Path>, codebook: &Codebook) -> Result<()> {
    write_model(
        path.as_ref(),
        MODEL_KIND_CODEBOOK,
        codebook.k(),
        codebook.dim(),
        codebook.centroids(),
        serde_json::json!({
            "format": "spvm",
            "kind": "codebook",
            "k": codebook.k(),
            "dim": codebook.dim(),
            "inertia": codebook.inertia(),
        }),
    )
}

struct RawModel {
    kind: u8,
    rows: usize,
    cols: usize,
    payload: Vec<f64>,
}

fn read_model(path: &Path) -> Result<RawModel> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MODEL_MAGIC, "model")?;
    let kind = r.read_u8().map_err(map_eof)?;
    let rows = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("model declares an empty shape".into()));
    }
    let expected = match kind {
        MODEL_KIND_PCA => (rows + 1) * cols,
        MODEL_KIND_CODEBOOK => rows * cols,
        other => return Err(Error::InvalidInput(format!("unknown model kind byte {other}"))),
    };
    let mut payload = vec![0.0f64; expected];
    r.read_f64_into::<LittleEndian>(&mut payload).map_err(map_eof)?;
    Ok(RawModel { kind, rows, cols, payload })
}

/// Loads a PCA model, refusing files that hold a codebook.
pub fn load_pca_model(path: impl AsRef<Path>) -> Result<PcaModel> {
    let raw = read_model(path.as_ref())?;
    if raw.kind != MODEL_KIND_PCA {
        return Err(Error::KindMismatch { expected: "pca", found: raw.kind });
    }
    let mut payload = raw.payload;
    let mean = payload.split_off(raw.rows * raw.cols);
    Ok(PcaModel::from_raw(mean, payload, raw.rows))
}

/// Loads a codebook, refusing files that hold a PCA model. Training inertia
/// is restored from the sidecar when one is present.
pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let raw = read_model(path)?;
    if raw.kind != MODEL_KIND_CODEBOOK {
        return Err(Error::KindMismatch { expected: "codebook", found: raw.kind });
    }
    let mut codebook = Codebook::from_centroids(raw.payload, raw.rows, raw.cols)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let value: serde_json::Value =
            serde_json::from_reader(BufReader::new(File::open(sidecar)?))?;
        codebook.set_inertia(value.get("inertia").and_then(serde_json::Value::as_f64));
    }
    Ok(codebook)
}

/// Loads whichever model kind the file holds.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, MODEL_MAGIC, "model")?;
    let kind = r.read_u8().map_err(map_eof)?;
    drop(r);
    match kind {
        MODEL_KIND_PCA => Ok(Model::Pca(load_pca_model(path)?)),
        MODEL_KIND_CODEBOOK => Ok(Model::Codebook(load_codebook(path)?)),
        other => Err(Error::InvalidInput(format!("unknown model kind byte {other}"))),
    }
}

fn encoding_shape_string(level: u8, k: usize, dim: usize) -> String {
    format!("level={level} k={k} dim={dim}")
}

/// Streaming encoding writer; shape and count are declared up front.
pub struct EncodingWriter {
    writer: BufWriter<File>,
    path: PathBuf,
    spec: PyramidSpec,
    k: usize,
    dim: usize,
    declared: u64,
    written: u64,
}

impl EncodingWriter {
    pub fn create(
        path: impl AsRef<Path>,
        spec: PyramidSpec,
        k: usize,
        dim: usize,
        count: u64,
    ) -> Result<Self> {
        if k == 0 || dim == 0 || k > u32::MAX as usize || dim > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("unrepresentable shape k={k} dim={dim}")));
        }
        let path = path.as_ref().to_path_buf();
        let mut writer = BufWriter::new(File::create(&path)?);
        writer.write_all(&ENCODING_MAGIC)?;
        writer.write_u32::<LittleEndian>(spec.level() as u32)?;
        writer.write_u32::<LittleEndian>(k as u32)?;
        writer.write_u32::<LittleEndian>(dim as u32)?;
        writer.write_u64::<LittleEndian>(count)?;
        Ok(Self { writer, path, spec, k, dim, declared: count, written: 0 })
    }

    pub fn write(&mut self, enc: &EncodedRepresentation) -> Result<()> {
        if self.written == self.declared {
            return Err(Error::InvalidInput(format!(
                "encoding file declared {} vectors; cannot append more",
                self.declared
            )));
        }
        if (enc.spec, enc.k, enc.dim) != (self.spec, self.k, self.dim) {
            return Err(Error::MixedEncodingShapes(
                encoding_shape_string(self.spec.level(), self.k, self.dim),
                encoding_shape_string(enc.spec.level(), enc.k, enc.dim),
            ));
        }
        let expected = EncodedRepresentation::expected_len(self.spec, self.k, self.dim);
        if enc.vector.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: enc.vector.len() });
        }
        self.writer.write_u32::<LittleEndian>(enc.image_id.len() as u32)?;
        self.writer.write_all(enc.image_id.as_bytes())?;
        for v in &enc.vector {
            self.writer.write_f32::<LittleEndian>(*v)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.declared {
            return Err(Error::InvalidInput(format!(
                "encoding file declared {} vectors but {} were written",
                self.declared, self.written
            )));
        }
        self.writer.flush()?;
        write_sidecar(
            &self.path,
            &serde_json::json!({
                "format": "spve",
                "level": self.spec.level(),
                "k": self.k,
                "dim": self.dim,
                "count": self.declared,
                "vector_len": EncodedRepresentation::expected_len(self.spec, self.k, self.dim),
            }),
        )
    }
}

/// Saves encodings that all share one (level, k, dim) shape.
pub fn save_encodings(path: impl AsRef<Path>, encodings: &[EncodedRepresentation]) -> Result<()> {
    let Some(first) = encodings.first() else {
        return Err(Error::InvalidInput(
            "cannot save an empty encoding list; the header needs a shape".into(),
        ));
    };
    let mut writer =
        EncodingWriter::create(path, first.spec, first.k, first.dim, encodings.len() as u64)?;
    for enc in encodings {
        writer.write(enc)?;
    }
    writer.finish()
}

/// Loads a whole encoding file; layouts are rebuilt from the header shape.
pub fn load_encodings(path: impl AsRef<Path>) -> Result<Vec<EncodedRepresentation>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, ENCODING_MAGIC, "encoding")?;
    let level = r.read_u32::<LittleEndian>().map_err(map_eof)?;
    if level > u8::MAX as u32 {
        return Err(Error::InvalidInput(format!("invalid pyramid level {level}")));
    }
    let spec = PyramidSpec::new(level as u8)?;
    let k = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    if k == 0 || dim == 0 {
        return Err(Error::InvalidInput("encoding file declares an empty shape".into()));
    }
    let count = r.read_u64::<LittleEndian>().map_err(map_eof)?;
    let len = EncodedRepresentation::expected_len(spec, k, dim);
    let layout = EncodedRepresentation::layout_for(spec, k, dim);
    let mut encodings = Vec::new();
    for _ in 0..count {
        let id_len = r.read_u32::<LittleEndian>().map_err(map_eof)?;
        if id_len > MAX_ID_LEN {
            return Err(Error::InvalidInput(format!("encoding declares an id of {id_len} bytes")));
        }
        let mut id_bytes = vec![0u8; id_len as usize];
        r.read_exact(&mut id_bytes).map_err(map_eof)?;
        let image_id = String::from_utf8(id_bytes)
            .map_err(|_| Error::InvalidInput("encoding id is not valid UTF-8".into()))?;
        let mut vector = vec![0.0f32; len];
        r.read_f32_into::<LittleEndian>(&mut vector).map_err(map_eof)?;
        encodings.push(EncodedRepresentation {
            image_id,
            spec,
            k,
            dim,
            vector,
            layout: layout.clone(),
        });
    }
    Ok(encodings)
}

fn csv_escape(id: &str) -> String {
    if id.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", id.replace('"', "\"\""))
    } else {
        id.to_string()
    }
}

/// Writes encodings as CSV: a header row, then one row per image holding the
/// id and every vector component. Values print at full `f32` round-trip
/// precision.
pub fn write_encodings_csv<W: Write>(
    out: &mut W,
    encodings: &[EncodedRepresentation],
) -> Result<()> {
    let Some(first) = encodings.first() else {
        return Err(Error::InvalidInput("cannot export an empty encoding list".into()));
    };
    for enc in encodings {
        if (enc.spec, enc.k, enc.dim) != (first.spec, first.k, first.dim) {
            return Err(Error::MixedEncodingShapes(
                encoding_shape_string(first.spec.level(), first.k, first.dim),
                encoding_shape_string(enc.spec.level(), enc.k, enc.dim),
            ));
        }
    }
    write!(out, "image_id")?;
    for i in 0..first.vector.len() {
        write!(out, ",v{i}")?;
    }
    writeln!(out)?;
    for enc in encodings {
        write!(out, "{}", csv_escape(&enc.image_id))?;
        for v in &enc.vector {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// [`write_encodings_csv`] straight to a file path.
pub fn export_encodings_csv(
    path: impl AsRef<Path>,
    encodings: &[EncodedRepresentation],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_encodings_csv(&mut out, encodings)?;
    out.flush()?;
    Ok(())
}
