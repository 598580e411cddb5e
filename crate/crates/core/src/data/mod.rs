//! Dataset schema, feature blobs and the manifest loader.

mod blob;
mod manifest;
mod record;

pub use blob::{decode_feature_blob, encode_feature_blob, read_feature_blob, write_feature_blob, BLOB_MAGIC};
pub use manifest::{
    load_manifest, write_manifest, Manifest, ManifestHeader, PairEntry, RecordEntry, MANIFEST_VERSION,
};
pub use record::{ArticleRecord, ImageCaptionPair, Label, MAX_PAIRS};
