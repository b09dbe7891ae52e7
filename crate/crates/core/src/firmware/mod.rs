//! Device database, configuration transformation and firmware bundles.

mod build;
mod descriptor;
mod transform;

pub use build::{BuildError, BuildJob, BuildRequest, BuildService, BuildState, Builder, FirmwareBundle, StubBuilder};
pub use descriptor::{
    read_specs, resolve, Antenna, DeviceDatabase, DeviceDescriptor, DeviceError, DeviceSpec, EthernetPort, Radio, Switch, Vlan,
};
pub use transform::{
    Platform, PlatformConfig, RenderStyle, Section, TransformContext, TransformError, TransformFailure,
    TransformModule, Transformer,
};

#[cfg(test)]
pub(crate) fn wr741_descriptor() -> DeviceDescriptor {
    resolve(&descriptor::tests::wr741(), None).expect("sample descriptor resolves")
}
