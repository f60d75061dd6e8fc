//! Volume I/O, preprocessing, sliding windows and synthetic phantoms.

pub mod io;
pub mod manifest;
pub mod overlay;
pub mod phantom;
pub mod preprocess;
pub mod volume;
pub mod window;

pub use manifest::{Manifest, Split, Subject};
pub use phantom::{generate_phantom, PhantomSpec};
pub use volume::{Geometry, MaskVolume, Orientation, Volume};
pub use window::{blend, plan_windows, SlidingWindowPlan};
