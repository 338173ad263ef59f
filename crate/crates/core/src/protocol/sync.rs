//! Parameter agreement between the client and each peer.
//!
//! The client sends its view in a `SyncRequest`; the peer answers with its
//! own view in a `SyncReply`. Both compare every field and abort on the
//! first difference, so one round trip per peer settles the session.

use crate::error::{Error, Result};
use crate::protocol::config::SessionConfig;
use crate::transport::{Channel, PayloadKind, Phase, Reader, Writer};

/// The fields every role must agree on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncParams {
    pub mode: u8,
    pub lr_raw: u64,
    pub batch_size: u32,
    pub batches: u32,
    pub epochs: u32,
    pub seed: u64,
    pub test_samples: u32,
    pub ring: u64,
    pub network: u64,
    /// Whether the session starts from a supplied model rather than the
    /// seeded initialization.
    pub resumed: bool,
}

impl SyncParams {
    pub fn of(cfg: &SessionConfig, resumed: bool) -> Result<Self> {
        let t = &cfg.train;
        Ok(Self {
            mode: cfg.mode.code(),
            lr_raw: t.lr_raw(cfg.fixed)?,
            batch_size: t.batch_size as u32,
            batches: t.batches as u32,
            epochs: t.epochs as u32,
            seed: t.seed,
            test_samples: t.test_samples as u32,
            ring: cfg.fixed.fingerprint(),
            network: cfg.network.fingerprint(),
            resumed,
        })
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(50);
        w.u8(self.mode)
            .u64(self.lr_raw)
            .u32(self.batch_size)
            .u32(self.batches)
            .u32(self.epochs)
            .u64(self.seed)
            .u32(self.test_samples)
            .u64(self.ring)
            .u64(self.network)
            .u8(self.resumed as u8);
        w.finish()
    }

    fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let p = Self {
            mode: r.u8()?,
            lr_raw: r.u64()?,
            batch_size: r.u32()?,
            batches: r.u32()?,
            epochs: r.u32()?,
            seed: r.u64()?,
            test_samples: r.u32()?,
            ring: r.u64()?,
            network: r.u64()?,
            resumed: r.u8()? != 0,
        };
        r.finish()?;
        Ok(p)
    }

    /// The first differing field.
    pub fn compare(&self, remote: &SyncParams) -> Result<()> {
        macro_rules! check {
            ($($f:ident),*) => {$(
                if self.$f != remote.$f {
                    return Err(Error::SyncMismatch {
                        field: stringify!($f),
                        local: format!("{:?}", self.$f),
                        remote: format!("{:?}", remote.$f),
                    });
                }
            )*};
        }
        check!(ring, network, mode, lr_raw, batch_size, batches, epochs, seed, test_samples, resumed);
        Ok(())
    }
}

/// Client side: propose and check the reply.
pub fn propose(chan: &mut Channel, local: &SyncParams) -> Result<()> {
    chan.enter(0, 0, Phase::Setup);
    chan.send(PayloadKind::SyncRequest, local.encode())?;
    let remote = SyncParams::decode(&chan.expect(PayloadKind::SyncReply)?)?;
    local.compare(&remote)
}

/// Peer side: answer with our own view, then check theirs.
pub fn answer(chan: &mut Channel, local: &SyncParams) -> Result<()> {
    chan.enter(0, 0, Phase::Setup);
    let remote = SyncParams::decode(&chan.expect(PayloadKind::SyncRequest)?)?;
    chan.send(PayloadKind::SyncReply, local.encode())?;
    local.compare(&remote)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use crate::protocol::config::{Mode, TrainConfig};
    use crate::ring::FixedConfig;
    use crate::transport::{in_process_pair, Instruments, Role, HEADER_LEN};

    fn cfg(epochs: usize) -> SessionConfig {
        SessionConfig::new(
            Mode::UShapedPrivate,
            TrainConfig { epochs, ..TrainConfig::default() },
            FixedConfig::default(),
            NetworkSpec::network1(10),
        )
    }

    fn run(a: SyncParams, b: SyncParams) -> (Result<()>, Result<()>, Instruments) {
        let inst = Instruments::new(0);
        let (mut c, mut p) = in_process_pair(Role::Client, Role::P0, inst.clone());
        let h = std::thread::spawn(move || answer(&mut p, &b));
        let r = propose(&mut c, &a);
        (r, h.join().unwrap(), inst)
    }

    #[test]
    fn identical_configs_agree_in_one_round_trip() {
        let p = SyncParams::of(&cfg(2), false).unwrap();
        let (a, b, inst) = run(p.clone(), p.clone());
        a.unwrap();
        b.unwrap();
        let snap = inst.counters.snapshot();
        let each = (HEADER_LEN + p.encode().len()) as u64;
        assert_eq!(snap.sent(Role::Client, Role::P0, Phase::Setup), each);
        assert_eq!(snap.sent(Role::P0, Role::Client, Phase::Setup), each);
        assert_eq!(snap.total_sent(), 2 * each);
    }

    #[test]
    fn differing_epochs_abort_both_sides() {
        let (a, b, _) = run(SyncParams::of(&cfg(2), false).unwrap(), SyncParams::of(&cfg(3), false).unwrap());
        assert!(matches!(a, Err(Error::SyncMismatch { field: "epochs", .. })));
        assert!(matches!(b, Err(Error::SyncMismatch { field: "epochs", .. })));
    }

    #[test]
    fn ring_and_network_are_fingerprinted() {
        let base = cfg(1);
        let mut other = base.clone();
        other.fixed = FixedConfig::new(64, 12).unwrap();
        let e = SyncParams::of(&base, false).unwrap().compare(&SyncParams::of(&other, false).unwrap());
        assert!(matches!(e, Err(Error::SyncMismatch { field: "ring", .. })));
        other = base.clone();
        other.network = NetworkSpec::network2(10);
        let e = SyncParams::of(&base, false).unwrap().compare(&SyncParams::of(&other, false).unwrap());
        assert!(matches!(e, Err(Error::SyncMismatch { field: "network", .. })));
    }
}
