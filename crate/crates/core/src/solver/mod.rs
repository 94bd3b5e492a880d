pub mod baseline;
pub mod linalg;
pub mod odometry;
pub mod run;
pub mod window;

pub use baseline::CvBaseline;
pub use odometry::{Association, FrameDiagnostics, FrameResult, Odometry, OdometryConfig, SensorKind};
pub use run::{run_baseline, run_odometry};
pub use window::{Factor, InnerConfig, SlidingWindow, WindowConfig, WindowPrior};
