//! One module per subcommand. Each artifact-producing command locks its
//! output directory, echoes the merged configuration, runs, and writes its
//! artifacts before releasing the lock.

pub mod evaluate;
pub mod finetune;
pub mod inspect;
pub mod mask_stats;
pub mod pretrain;
