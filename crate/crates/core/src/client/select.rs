use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;

use super::ClientError;

/// Weighted list of server addresses shipped with the application.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerList {
    entries: Vec<(String, f64)>,
}

impl ServerList {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, ClientError> {
        if entries.is_empty() {
            return Err(ClientError::EmptyServerList);
        }
        if let Some((addr, w)) = entries.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(ClientError::InvalidWeight { address: addr.clone(), weight: *w });
        }
        Ok(Self { entries })
    }

    /// Equal weights.
    pub fn uniform<I: IntoIterator<Item = S>, S: Into<String>>(addresses: I) -> Result<Self, ClientError> {
        Self::new(addresses.into_iter().map(|a| (a.into(), 1.0)).collect())
    }

    /// Parses `addr[=weight],addr[=weight],...`.
    pub fn parse(spec: &str) -> Result<Self, ClientError> {
        let mut entries = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (addr, weight) = match part.rsplit_once('=') {
                Some((a, w)) => {
                    let w = w.parse::<f64>().map_err(|_| ClientError::InvalidWeight { address: a.into(), weight: f64::NAN })?;
                    (a.to_owned(), w)
                }
                None => (part.to_owned(), 1.0),
            };
            entries.push((addr, weight));
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Servers that recently failed, each until its expiry.
#[derive(Debug, Clone, Default)]
pub struct Blacklist {
    until: BTreeMap<String, Duration>,
}

impl Blacklist {
    pub fn add(&mut self, address: &str, now: Duration, ttl: Duration) {
        self.until.insert(address.to_owned(), now + ttl);
    }

    pub fn contains(&self, address: &str, now: Duration) -> bool {
        self.until.get(address).is_some_and(|t| now < *t)
    }

    pub fn purge(&mut self, now: Duration) {
        self.until.retain(|_, t| now < *t);
    }

    pub fn earliest_expiry(&self, now: Duration) -> Option<Duration> {
        self.until.values().copied().filter(|t| now < *t).min()
    }

    pub fn len(&self) -> usize {
        self.until.len()
    }

    pub fn is_empty(&self) -> bool {
        self.until.is_empty()
    }
}

/// Samples a server with probability proportional to its weight among the
/// entries not blacklisted at `now`.
pub fn pick_server<'a, R: Rng + ?Sized>(
    list: &'a ServerList,
    blacklist: &Blacklist,
    now: Duration,
    rng: &mut R,
) -> Result<&'a str, ClientError> {
    let eligible: Vec<&(String, f64)> = list.entries.iter().filter(|(a, _)| !blacklist.contains(a, now)).collect();
    if eligible.is_empty() {
        let retry_at = blacklist.earliest_expiry(now).unwrap_or(now);
        return Err(ClientError::AllServersBlacklisted { retry_at });
    }
    let total: f64 = eligible.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen::<f64>() * total;
    for (addr, w) in &eligible {
        if x < *w {
            return Ok(addr);
        }
        x -= w;
    }
    Ok(&eligible.last().expect("non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_lists() {
        assert_eq!(ServerList::new(vec![]), Err(ClientError::EmptyServerList));
        assert!(ServerList::new(vec![("a".into(), 0.0)]).is_err());
        assert!(ServerList::new(vec![("a".into(), f64::NAN)]).is_err());
        assert!(ServerList::parse("a:1=x").is_err());
    }

    #[test]
    fn parse_weights() {
        let l = ServerList::parse("h1:7000=1, h2:7000=1,h3:7000=2").unwrap();
        assert_eq!(l.entries()[2], ("h3:7000".to_owned(), 2.0));
        assert_eq!(ServerList::parse("h:1").unwrap().entries()[0].1, 1.0);
    }

    #[test]
    fn single_entry_always_chosen() {
        let l = ServerList::uniform(["only:1"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(pick_server(&l, &Blacklist::default(), Duration::ZERO, &mut rng).unwrap(), "only:1");
        }
    }

    #[test]
    fn weighted_frequencies_match_analytic_shares() {
        let l = ServerList::new(vec![("a".into(), 1.0), ("b".into(), 1.0), ("c".into(), 2.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = BTreeMap::<&str, usize>::new();
        let n = 100_000;
        for _ in 0..n {
            *counts.entry(pick_server(&l, &Blacklist::default(), Duration::ZERO, &mut rng).unwrap()).or_default() += 1;
        }
        // analytic share of entry i is w_i / sum(w)
        for (addr, share) in [("a", 0.25), ("b", 0.25), ("c", 0.5)] {
            let freq = counts[addr] as f64 / n as f64;
            assert!((freq - share).abs() <= 0.02, "{addr}: {freq}");
        }
    }

    #[test]
    fn blacklisted_never_chosen_until_expiry() {
        let l = ServerList::uniform(["a", "b"]).unwrap();
        let mut bl = Blacklist::default();
        bl.add("a", Duration::ZERO, Duration::from_secs(30));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(pick_server(&l, &bl, Duration::from_secs(29), &mut rng).unwrap(), "b");
        }
        bl.add("b", Duration::ZERO, Duration::from_secs(40));
        assert_eq!(
            pick_server(&l, &bl, Duration::from_secs(1), &mut rng),
            Err(ClientError::AllServersBlacklisted { retry_at: Duration::from_secs(30) })
        );
        assert_eq!(pick_server(&l, &bl, Duration::from_secs(30), &mut rng).unwrap(), "a");
    }
}
