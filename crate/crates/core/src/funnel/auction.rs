use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::world::AdId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bidder {
    pub ad_id: AdId,
    pub rankscore: f64,
    pub bid: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub ad_id: AdId,
    pub rankscore: f64,
    pub bid: f64,
    pub price: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuctionResult {
    /// Winners by rankscore descending.
    pub slots: Vec<Slot>,
    /// Everyone else, by rankscore descending.
    pub losers: Vec<Bidder>,
}

/// Rankscore descending, then ad id ascending.
pub(crate) fn by_rankscore(a: &Bidder, b: &Bidder) -> Ordering {
    b.rankscore
        .partial_cmp(&a.rankscore)
        .unwrap_or(Ordering::Equal)
        .then(a.ad_id.cmp(&b.ad_id))
}

/// A bidder can take a slot with a positive rankscore and a bid at or above
/// the reserve.
#[inline]
pub(crate) fn qualifies(b: &Bidder, reserve_price: f64) -> bool {
    b.rankscore > 0.0 && b.bid >= reserve_price
}

/// Generalized second-price auction. The winner of slot i pays
/// `bid_i · rs_next / rs_i`, where `rs_next` is the rankscore of the next
/// bidder in rank order, floored at the reserve and capped at its own bid.
pub fn auction(scored: &[Bidder], n_slots: usize, reserve_price: f64) -> Result<AuctionResult> {
    if n_slots == 0 {
        return Err(Error::Argument("n_slots must be at least 1".into()));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(by_rankscore);
    let mut slots = Vec::with_capacity(n_slots);
    let mut losers = Vec::new();
    for (i, b) in ranked.iter().enumerate() {
        if slots.len() < n_slots && qualifies(b, reserve_price) {
            let next = ranked.get(i + 1).map_or(0.0, |n| n.rankscore);
            let price = (b.bid * next / b.rankscore).max(reserve_price).min(b.bid);
            slots.push(Slot {
                ad_id: b.ad_id,
                rankscore: b.rankscore,
                bid: b.bid,
                price,
            });
        } else {
            losers.push(*b);
        }
    }
    Ok(AuctionResult { slots, losers })
}

/// Winners of [`auction`] without pricing, in slot order.
pub(crate) fn winners(
    scored: impl Iterator<Item = Bidder>,
    n_slots: usize,
    reserve_price: f64,
) -> Vec<Bidder> {
    let mut top: Vec<Bidder> = Vec::with_capacity(n_slots + 1);
    for b in scored.filter(|b| qualifies(b, reserve_price)) {
        if top.len() == n_slots && by_rankscore(&b, &top[n_slots - 1]) != Ordering::Less {
            continue;
        }
        let pos = top.partition_point(|t| by_rankscore(t, &b) == Ordering::Less);
        top.insert(pos, b);
        top.truncate(n_slots);
    }
    top
}
