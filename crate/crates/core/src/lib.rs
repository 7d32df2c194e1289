pub mod cs;
pub mod gatekeeper;
pub mod hid;
pub mod image;
pub mod integrity;
pub mod merkle;
pub mod pki;
pub mod provision;
pub mod router;
pub mod scenario;
pub mod trace;
pub mod usb;
