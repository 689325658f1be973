//! Byte-level entry points shared by the fuzz targets and the corpus test.
//! Each one must return without panicking for any input.

use crate::accountant::{compose_and_convert, AccountantLedger};
use crate::dataio::{dataset_from_parts, ManifestFile, TensorFile};
use crate::pipeline::{ExperimentConfig, Metrics};
use crate::tinynn::ModelCheckpoint;

/// Splits `data` at a little-endian u32 length prefix.
fn split_prefixed(data: &[u8]) -> Option<(&[u8], &[u8])> {
    let len = u32::from_le_bytes(data.get(..4)?.try_into().ok()?) as usize;
    let rest = &data[4..];
    (len <= rest.len()).then(|| rest.split_at(len))
}

pub fn tensor(data: &[u8]) {
    if let Ok(t) = TensorFile::decode(data) {
        let again = TensorFile::decode(&t.encode()).expect("re-encoded tensor decodes");
        assert_eq!(again.shape(), t.shape());
    }
}

pub fn manifest(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ManifestFile::parse(text);
    }
}

/// `[u32 len][images][u32 len][labels][manifest json]`
pub fn dataset(data: &[u8]) {
    let Some((images, rest)) = split_prefixed(data) else { return };
    let Some((labels, manifest)) = split_prefixed(rest) else { return };
    let (Ok(images), Ok(labels)) = (TensorFile::decode(images), TensorFile::decode(labels)) else { return };
    let Ok(manifest) = std::str::from_utf8(manifest).map_err(|_| ()).and_then(|t| ManifestFile::parse(t).map_err(|_| ())) else {
        return;
    };
    if let Ok(ds) = dataset_from_parts(images, labels, manifest) {
        let _ = ds.class_counts();
    }
}

pub fn ledger(data: &[u8]) {
    if let Ok(l) = std::str::from_utf8(data).map_err(|_| ()).and_then(|t| AccountantLedger::from_json(t).map_err(|_| ())) {
        if !l.is_empty() {
            let _ = compose_and_convert(&l, 1e-5);
        }
    }
}

pub fn config(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            let _ = cfg.snapshot();
        }
    }
}

/// `[u32 len][sidecar json][parameter tensor]`
pub fn checkpoint(data: &[u8]) {
    let Some((sidecar, tensor)) = split_prefixed(data) else { return };
    let (Ok(sidecar), Ok(tensor)) = (std::str::from_utf8(sidecar), TensorFile::decode(tensor)) else { return };
    let _ = ModelCheckpoint::from_parts(sidecar, tensor);
}

pub fn metrics(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Metrics::parse(text);
    }
}

/// Target names and entry points, in the order of `fuzz/fuzz_targets/`.
pub const TARGETS: [(&str, fn(&[u8])); 7] = [
    ("tensor_decode", tensor),
    ("manifest_parse", manifest),
    ("dataset_parts", dataset),
    ("ledger_json", ledger),
    ("config_parse", config),
    ("checkpoint_parts", checkpoint),
    ("metrics_parse", metrics),
];
