//! Session server for programming by demonstration: wire protocol, session
//! state machine, training-set persistence, execution streaming and a mock
//! robot endpoint.

pub mod executor;
pub mod mock_robot;
pub mod protocol;
pub mod session;
pub mod storage;
pub mod transport;

pub use protocol::{Envelope, ErrorCode, MessageType, Mode};
pub use session::{Session, SessionConfig};
pub use storage::{DataDir, Manifest};
