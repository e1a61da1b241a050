//! Synthetic shape scenes, augmentation and COCO-style serialization.

pub mod augment;
pub mod coco;
pub mod io;
pub mod presets;
pub mod scene;
pub mod shapes;

pub use augment::{apply_policy, copy_paste_augment, lsj_augment, lsj_transform, paste_object, AugmentPolicy, CopyPastePolicy, LsjPolicy};
pub use coco::{parse_coco_json, read_coco_json, write_coco_json, CocoFile, CocoSummary, Rejected};
pub use io::{load_dataset, save_dataset};
pub use scene::*;
pub use shapes::{Family, Mask, Texture};
