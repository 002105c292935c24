//! Corpus loading, zero-shot splits, and fixed-viewpoint rendering.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/<dataset>/sketches/<category>/<id>.png
//! <root>/<dataset>/sketches/<category>/{train,test}/<id>.png   (optional role folders)
//! <root>/<dataset>/shapes/<category>/<id>.(obj|off)
//! ```

mod manifest;
pub mod mesh;
pub mod render;
mod split;

pub use manifest::{
    load_manifest, DatasetManifest, DatasetName, Role, ShapeRecord, SketchRecord,
};
pub use mesh::{load_mesh, Mesh};
pub use render::{render_mesh, render_views, CameraRig, Projection};
pub use split::{apply_split, make_split, make_split_with, SplitOptions, SplitProtocol, SplitSpec};
