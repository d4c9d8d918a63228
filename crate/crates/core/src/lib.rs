//! Single-image coded-exposure capture of high-speed video and its sparse
//! reconstruction.
//!
//! * [`shutter`]: single-bump pixel shutters and the measurement operator.
//! * [`csc`]: convolutional sparse coding recovery with a temporal-gradient
//!   penalty, solved by ADMM.
//! * [`training`]: learning the 2D filter bank used by [`csc`].
//! * [`patch`]: the patch-based baseline (block selection, K-SVD, lasso).
//! * [`metrics`]: PSNR and MS-SSIM.
//! * [`tensor_io`]: frame directories and the `CVT1` tensor container.

pub mod csc;
pub mod error;
pub mod fourier;
pub mod metrics;
pub mod patch;
pub mod shutter;
pub mod synthetic;
pub mod tensor_io;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{FrameSequence, Image};
