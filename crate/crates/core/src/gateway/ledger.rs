use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Completion, GenerationRequest, RequestTag};

/// Whitespace-token estimate used when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Prices per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPrices {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub requests: u64,
    pub cache_hits: u64,
}

impl TagUsage {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    fn add(&mut self, other: &TagUsage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.requests += other.requests;
        self.cache_hits += other.cache_hits;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub tag: RequestTag,
    /// Digest of the request that produced this record.
    #[serde(default)]
    pub request: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub approximate: bool,
}

/// Token accounting per request tag. Records are ordered by tag and
/// request digest, not by completion time. Only completed backend calls are
/// recorded; cache hits are counted separately and cost nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub per_tag: BTreeMap<RequestTag, TagUsage>,
    pub records: Vec<UsageRecord>,
    /// Some counts are whitespace estimates.
    pub approximate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<UnitPrices>,
}

impl UsageLedger {
    pub(crate) fn record(&mut self, request: &GenerationRequest, completion: &Completion) {
        let (input, output, approximate) = match completion.usage {
            Some(u) => (u.input_tokens, u.output_tokens, false),
            None => (
                estimate_tokens(&request.system_text) + estimate_tokens(&request.user_text),
                estimate_tokens(&completion.text),
                true,
            ),
        };
        let entry = self.per_tag.entry(request.tag).or_default();
        entry.input_tokens += input;
        entry.output_tokens += output;
        entry.requests += 1;
        self.approximate |= approximate;
        let digest = request.digest();
        // Concurrent calls finish in any order; keeping records sorted by
        // (tag, request) makes the serialized ledger independent of it.
        let at = self
            .records
            .partition_point(|r| (r.tag, r.request.as_str()) <= (request.tag, digest.as_str()));
        self.records.insert(at, UsageRecord {
            tag: request.tag,
            request: digest,
            input_tokens: input,
            output_tokens: output,
            approximate,
        });
    }

    pub(crate) fn record_cache_hit(&mut self, tag: RequestTag) {
        self.per_tag.entry(tag).or_default().cache_hits += 1;
    }

    pub fn total(&self) -> TagUsage {
        let mut t = TagUsage::default();
        for u in self.per_tag.values() {
            t.add(u);
        }
        t
    }

    /// Sum over per-request records; equals [`Self::total`] token counts.
    pub fn record_totals(&self) -> (u64, u64, u64) {
        self.records.iter().fold((0, 0, 0), |(i, o, n), r| {
            (i + r.input_tokens, o + r.output_tokens, n + 1)
        })
    }

    pub fn cost(&self) -> Option<f64> {
        let p = self.prices?;
        let t = self.total();
        Some(
            t.input_tokens as f64 * p.input_per_million / 1e6 + t.output_tokens as f64 * p.output_per_million / 1e6,
        )
    }
}
