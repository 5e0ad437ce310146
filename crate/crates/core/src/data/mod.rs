//! Scene files, checkpoints, and the synthetic scene generator.

mod formats;
mod manifest;
mod synth;

pub use formats::{
    encode_checkpoint, encode_depth, load_checkpoint, load_depth, load_png, read_checkpoint, read_depth, save_checkpoint, save_depth,
    save_png, sha256_hex, structure_bytes, structure_checksum, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
    DEPTH_MAGIC, DEPTH_VERSION,
};
pub use manifest::{
    load_scene, read_manifest, write_manifest, Frame, Intrinsics, LoadedScene, SceneManifest, Split, View,
    MANIFEST_VERSION,
};
pub use synth::{
    generate_synthetic, recolor_pool, seed_cloud, write_synthetic, ColorMap, ColorScheme, Layout, RecolorSet,
    SyntheticScene, SyntheticSpec, Trajectory, POOL_SIZE, TUBE_LENGTH, TUBE_RADIUS,
};
