//! TCP wiring for roles running as separate processes.
//!
//! Roles are ordered client, dealer, P1, P0. Each role listens on its own
//! endpoint, dials every later role and then accepts every earlier one, so
//! no two roles wait on each other.

use std::net::TcpListener;

use crate::error::{Error, Result};
use crate::protocol::config::{Endpoints, Mode};
use crate::protocol::Peers;
use crate::transport::{accept_tcp, connect_tcp, Instruments, Role};

const ORDER: [Role; 4] = [Role::Client, Role::Dealer, Role::P1, Role::P0];

/// Connects `role` to every other role of `mode`. `listen` overrides the
/// role's own endpoint for binding, e.g. `0.0.0.0:7700`.
pub fn connect_role(role: Role, mode: Mode, endpoints: &Endpoints, listen: Option<&str>, inst: Instruments) -> Result<Peers> {
    let present: Vec<Role> = ORDER.iter().copied().filter(|r| mode.roles().contains(r)).collect();
    let pos = present
        .iter()
        .position(|&r| r == role)
        .ok_or_else(|| Error::InvalidConfig(format!("{} takes no part in {} mode", role, mode)))?;
    let listener = match (pos, endpoints.of(role)) {
        (0, _) => None,
        (_, Some(own)) => Some(TcpListener::bind(listen.unwrap_or(own))?),
        (_, None) => return Err(Error::InvalidConfig(format!("no endpoint for {}", role))),
    };
    let mut chans = Vec::new();
    for &later in &present[pos + 1..] {
        let addr = endpoints.of(later).ok_or_else(|| Error::InvalidConfig(format!("no endpoint for {}", later)))?;
        chans.push(connect_tcp(addr, role, later, inst.clone())?);
    }
    if let Some(l) = &listener {
        for _ in 0..pos {
            let c = accept_tcp(l, role, inst.clone())?;
            if !present[..pos].contains(&c.peer()) || chans.iter().any(|x| x.peer() == c.peer()) {
                return Err(Error::UnexpectedMessage(format!("unexpected connection from {}", c.peer())));
            }
            chans.push(c);
        }
    }
    Ok(Peers::new(chans))
}
