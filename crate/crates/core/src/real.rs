use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point element type of networks and traces.
///
/// Gradient oracles run in `f64`; training runs in `f32`.
pub trait Real: Float + FloatConst + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("float converts to f32")
    }
}

impl Real for f32 {}
impl Real for f64 {}
