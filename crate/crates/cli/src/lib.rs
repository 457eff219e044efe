pub mod analysis;
pub mod config;
pub mod finetune;
pub mod output;
pub mod pretrain;
pub mod run;

pub use config::RunConfig;
pub use run::Run;

use point2vec::Error;

/// Process exit status for a failed command: 1 for usage and configuration
/// problems, 2 for unreadable or unsuitable data, 3 for numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else if err.is_data() || matches!(err.root(), Error::Checkpoint(_) | Error::Truncated { .. })
    {
        2
    } else {
        1
    }
}
