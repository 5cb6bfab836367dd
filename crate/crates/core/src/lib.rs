//! Deformable 3D image registration trained with a mean-teacher scheme.
//!
//! The student network is trained by backpropagation on a similarity loss
//! plus two regularizers: spatial smoothness of the displacement field and
//! temporal consistency with an exponential-moving-average teacher. Both
//! regularization weights are set at every step from Monte Carlo dropout
//! uncertainty of the teacher (see [`uncertainty`]).
//!
//! Modules, bottom-up:
//! - [`volume`]: dense grids and the MVOL/MSEG file format
//! - [`autodiff`]: a tape-based reverse-mode engine over a closed op set
//! - [`warp`]: pull-warping and Jacobian analysis
//! - [`synth`]: multimodal phantoms with known deformations
//! - [`regnet`]: the encoder-decoder registration network
//! - [`losses`]: MIND similarity, smoothness and consistency losses
//! - [`uncertainty`]: MC dropout maps and adaptive weights
//! - [`trainer`]: the mean-teacher training loop and Adam
//! - [`eval`]: Dice, surface distance and Jacobian statistics

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod regnet;
pub mod synth;
pub mod trainer;
pub mod uncertainty;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use volume::{LabelVolume, Volume};
pub use warp::DisplacementField;
