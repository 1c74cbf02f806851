pub mod augment;
pub mod schedule;
pub mod store;
pub mod synthetic;

pub use augment::{disparity_normalize, rgb_channel_drop, DisparityRange, RgbNorm};
pub use schedule::{build_epoch_schedule, DatasetSpec, Draw, EpochSchedule, Strategy};
pub use synthetic::{gen_synthetic, SyntheticWorld};
