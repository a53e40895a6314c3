pub mod agents;
pub mod ddpg;
pub mod harness;
pub mod lmpc;
pub mod plant;
pub mod pricing;
pub mod reward;
pub mod sysid;

// Book chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/sysid.md")]
    mod sysid {}
    #[doc = include_str!("../../../book/src/lmpc.md")]
    mod lmpc {}
    #[doc = include_str!("../../../book/src/ddpg.md")]
    mod ddpg {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
