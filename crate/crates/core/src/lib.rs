//! LiDAR-only bird's-eye-view perception toolkit.
//!
//! The crate covers the full single-frame pipeline:
//!
//! * [`kitti_io`] reads velodyne scans, labels and calibration files and writes
//!   detections in the KITTI result format.
//! * [`bev`] rasterizes a point cloud into a three-band maximum-reflectance
//!   BEV image.
//! * [`augment`] implements vertical re-binning, image-wide reflectance jitter
//!   and the multi-offset inference encodings.
//! * [`geometry`] provides oriented boxes, convex clipping, rotated / 3D IoU
//!   and rotated NMS.
//! * [`net`] is a forward-only implementation of the detector blocks, neck,
//!   head decoding and loss value functions.
//! * [`recovery`] lifts BEV detections to 3D boxes with Tukey-fence filtered
//!   height queries.
//! * [`eval`] implements KITTI-style AP@40 evaluation in BEV and 3D.
//! * [`pipeline`] composes the stages over directory trees.

pub mod augment;
pub mod bev;
pub mod class;
pub mod eval;
pub mod geometry;
pub mod kitti_io;
pub mod net;
pub mod pipeline;
pub mod recovery;

pub use augment::AugmentParams;
pub use bev::{BevImage, GridConfig};
pub use class::{LabelClass, ObjectClass};
pub use eval::EvalConfig;
pub use geometry::{Box3D, OrientedBevBox, ScoredBox};
pub use kitti_io::{Calibration, Detection3D, KittiLabel, Point, PointCloud};
pub use net::NetConfig;
pub use pipeline::PipelineConfig;
pub use recovery::RecoveryParams;
