use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::now_ms;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub device: String,
    pub holder: String,
    pub token: String,
    pub acquired_at: u64,
}

struct Held {
    reservation: Reservation,
    renewed: Instant,
}

/// Advisory per-device locks. A device accepts mutating commands only with
/// the token of its current reservation.
pub struct ReservationTable {
    held: Mutex<HashMap<String, Held>>,
    lease: Option<Duration>,
    counter: AtomicU64,
    salt: u64,
}

impl Default for ReservationTable {
    fn default() -> Self {
        Self::new(None)
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ReservationTable {
    /// `lease` adds expiry so a crashed holder cannot block a device forever.
    pub fn new(lease: Option<Duration>) -> Self {
        let salt = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
            ^ u64::from(std::process::id());
        ReservationTable {
            held: Mutex::new(HashMap::new()),
            lease,
            counter: AtomicU64::new(1),
            salt,
        }
    }

    fn expired(&self, h: &Held) -> bool {
        self.lease.is_some_and(|l| h.renewed.elapsed() > l)
    }

    fn new_token(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        format!("{:016x}{:04x}", mix(self.salt ^ n), n & 0xffff)
    }

    /// Succeeds iff the device is unheld (or already held by `holder`, which renews).
    pub fn reserve(&self, device: &str, holder: &str) -> Result<Reservation> {
        let mut held = self.held.lock();
        if let Some(h) = held.get_mut(device) {
            if !self.expired(h) {
                if h.reservation.holder == holder {
                    h.renewed = Instant::now();
                    h.reservation.acquired_at = now_ms();
                    return Ok(h.reservation.clone());
                }
                return Err(Error::reserved(format!(
                    "{device} is reserved by {}",
                    h.reservation.holder
                )));
            }
        }
        let reservation = Reservation {
            device: device.to_string(),
            holder: holder.to_string(),
            token: self.new_token(),
            acquired_at: now_ms(),
        };
        held.insert(
            device.to_string(),
            Held {
                reservation: reservation.clone(),
                renewed: Instant::now(),
            },
        );
        Ok(reservation)
    }

    pub fn release(&self, token: &str) -> Result<()> {
        let mut held = self.held.lock();
        let device = held
            .iter()
            .find(|(_, h)| h.reservation.token == token)
            .map(|(d, _)| d.clone())
            .ok_or_else(|| Error::bad_args("unknown reservation token"))?;
        held.remove(&device);
        Ok(())
    }

    /// Ok iff `token` is the live reservation on `device`.
    pub fn check(&self, device: &str, token: Option<&str>) -> Result<()> {
        let held = self.held.lock();
        match (held.get(device), token) {
            (Some(h), Some(t)) if !self.expired(h) && h.reservation.token == t => Ok(()),
            (Some(h), _) if !self.expired(h) => Err(Error::reserved(format!(
                "{device} is reserved by {}",
                h.reservation.holder
            ))),
            _ => Err(Error::reserved(format!("{device} is not reserved by the caller"))),
        }
    }

    pub fn holder(&self, device: &str) -> Option<String> {
        let held = self.held.lock();
        held.get(device)
            .filter(|h| !self.expired(h))
            .map(|h| h.reservation.holder.clone())
    }

    pub fn list(&self) -> Vec<Reservation> {
        let held = self.held.lock();
        let mut v: Vec<_> = held
            .values()
            .filter(|h| !self.expired(h))
            .map(|h| h.reservation.clone())
            .collect();
        v.sort_by(|a, b| a.device.cmp(&b.device));
        v
    }
}
